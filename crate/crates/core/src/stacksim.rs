//! Kinematic cup-stacking world in the YZ plane.
//!
//! A velocity-limited gripper moves three nestable cups. Cups start nested
//! at the task position; the goal is a two-level pyramid: two base cups
//! 6 cm apart and the third resting across both.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netblocks::IMAGE_SIZE;
use crate::numkernel::Tensor;

pub const SIM_VERSION: u32 = 1;
pub const WORLD_WIDTH: f64 = 0.5;
pub const WORLD_HEIGHT: f64 = 0.3;
pub const CUP_WIDTH: f64 = 0.04;
pub const CUP_HEIGHT: f64 = 0.05;
/// Height gained by a cup nested inside another.
pub const NEST_OFFSET: f64 = 0.01;
pub const V_MAX: f64 = 0.5;
pub const APERTURE_RATE: f64 = 4.0;
pub const GRASP_RADIUS: f64 = 0.015;
pub const NEST_TOLERANCE: f64 = 0.01;
pub const STACK_TOLERANCE: f64 = 0.02;
pub const SLOT_OFFSET: f64 = 0.03;
pub const SUCCESS_TOLERANCE: f64 = 0.01;
pub const CLEARANCE: f64 = 0.05;
pub const HOME_Z: f64 = 0.25;
pub const TRANSIT_Z: f64 = 0.11;
pub const TEACH_HZ: f64 = 10.0;
/// Commanded speed ceiling of the teacher script.
pub const TEACHER_MAX_SPEED: f64 = 0.15;
pub const JAW_WIDTH: f64 = 0.01;
pub const JAW_HEIGHT: f64 = 0.04;
pub const CUP_GRAY: [f32; 3] = [0.5, 0.65, 0.8];
const CUPS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Position {
    A,
    B,
    C,
    D,
    E,
}

impl Position {
    pub const ALL: [Position; 5] = [Position::A, Position::B, Position::C, Position::D, Position::E];
    pub const TAUGHT: [Position; 3] = [Position::A, Position::C, Position::E];

    /// Cup-stack center along y.
    pub fn y(self) -> f64 {
        0.15 + 0.05 * self as usize as f64
    }

    pub fn is_taught(self) -> bool {
        Self::TAUGHT.contains(&self)
    }

    pub fn label(self) -> &'static str {
        ["A", "B", "C", "D", "E"][self as usize]
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Position {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Position::ALL
            .into_iter()
            .find(|p| p.label().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Config(format!("unknown position `{s}` (expected A-E)")))
    }
}

/// Parse a list such as `A,C,E`.
pub fn parse_positions(s: &str) -> Result<Vec<Position>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(str::parse).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Support {
    Floor,
    Nested(usize),
    Stacked(usize),
    Bridged(usize, usize),
    Held,
}

impl Support {
    fn rests_on(self, other: usize) -> bool {
        match self {
            Support::Nested(c) | Support::Stacked(c) => c == other,
            Support::Bridged(a, b) => a == other || b == other,
            Support::Floor | Support::Held => false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cup {
    /// Center of the cup rectangle.
    pub y: f64,
    pub z: f64,
    pub support: Support,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Command {
    pub y: f64,
    pub z: f64,
    pub aperture: f64,
}

impl Command {
    pub fn to_vec(self) -> Vec<f64> {
        vec![self.y, self.z, self.aperture]
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match *v {
            [y, z, aperture] => Ok(Self { y, z, aperture }),
            _ => Err(Error::Input(format!("command needs 3 values, got {}", v.len()))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub gripper_y: f64,
    pub gripper_z: f64,
    pub aperture: f64,
    pub cups: [Cup; CUPS],
    pub attached: Option<usize>,
    pub time: f64,
}

/// Where the cups start and where the gripper waits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub position: Position,
    /// Center of the nested stack, including any trial jitter.
    pub center_y: f64,
    /// Home y; always the nominal position.
    pub home_y: f64,
}

impl TaskSpec {
    pub fn new(position: Position) -> Self {
        Self::jittered(position, 0.0)
    }

    pub fn jittered(position: Position, offset: f64) -> Self {
        Self { position, center_y: position.y() + offset, home_y: position.y() }
    }

    pub fn home(&self) -> Command {
        Command { y: self.home_y, z: HOME_Z, aperture: 1.0 }
    }

    /// Target slots: left base, right base, top.
    pub fn slots(&self) -> [(f64, f64); 3] {
        let base_z = CUP_HEIGHT / 2.0;
        [
            (self.center_y - SLOT_OFFSET, base_z),
            (self.center_y + SLOT_OFFSET, base_z),
            (self.center_y, base_z + CUP_HEIGHT),
        ]
    }

    /// Three nested cups at the task position, gripper open at home.
    pub fn initial_state(&self) -> WorldState {
        let z0 = CUP_HEIGHT / 2.0;
        let cup = |i: usize, support| Cup { y: self.center_y, z: z0 + i as f64 * NEST_OFFSET, support };
        let home = self.home();
        WorldState {
            gripper_y: home.y,
            gripper_z: home.z,
            aperture: home.aperture,
            cups: [cup(0, Support::Floor), cup(1, Support::Nested(0)), cup(2, Support::Nested(1))],
            attached: None,
            time: 0.0,
        }
    }
}

/// Scenario description used by the command line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub position: Position,
    pub seed: u64,
    pub speed: f64,
    pub noise: f64,
}

impl WorldState {
    /// Cups with nothing resting on or inside them.
    pub fn is_topmost(&self, cup: usize) -> bool {
        self.attached != Some(cup)
            && self
                .cups
                .iter()
                .enumerate()
                .all(|(j, c)| j == cup || Some(j) == self.attached || !c.support.rests_on(cup))
    }

    /// Every resting cup reaches the floor through its supports.
    pub fn supports_are_closed(&self) -> bool {
        (0..CUPS).all(|i| {
            let mut cur = i;
            for _ in 0..=CUPS {
                match self.cups[cur].support {
                    Support::Floor => return true,
                    Support::Held => return Some(cur) == self.attached && cur == i,
                    Support::Nested(c) | Support::Stacked(c) => cur = c,
                    Support::Bridged(a, b) => {
                        let level = self.cups[a].z;
                        return self.cups[b].z == level && {
                            let mut probe = self.clone();
                            probe.cups[i].support = Support::Floor;
                            probe.supports_are_closed()
                        };
                    }
                }
            }
            false
        })
    }

    fn drop_cup(&mut self, id: usize) {
        let (y, _) = (self.cups[id].y, self.cups[id].z);
        let others: Vec<usize> = (0..CUPS).filter(|&j| j != id && self.is_topmost(j)).collect();
        let nearest = |tol: f64| {
            others.iter().copied().filter(|&j| (self.cups[j].y - y).abs() <= tol).min_by(|&a, &b| {
                let (da, db) = ((self.cups[a].y - y).abs(), (self.cups[b].y - y).abs());
                da.total_cmp(&db).then(a.cmp(&b))
            })
        };
        let overlaps = |j: usize| (self.cups[j].y - y).abs() < CUP_WIDTH;
        let cup = if let Some(j) = nearest(NEST_TOLERANCE) {
            Cup { y: self.cups[j].y, z: self.cups[j].z + NEST_OFFSET, support: Support::Nested(j) }
        } else if let Some(j) = nearest(STACK_TOLERANCE) {
            Cup { y, z: self.cups[j].z + CUP_HEIGHT, support: Support::Stacked(j) }
        } else if let Some((a, b)) = others.iter().enumerate().find_map(|(k, &a)| {
            others[k + 1..]
                .iter()
                .find(|&&b| overlaps(a) && overlaps(b) && self.cups[a].z == self.cups[b].z)
                .map(|&b| (a, b))
        }) {
            Cup { y, z: self.cups[a].z + CUP_HEIGHT, support: Support::Bridged(a, b) }
        } else {
            Cup { y, z: CUP_HEIGHT / 2.0, support: Support::Floor }
        };
        self.cups[id] = cup;
    }
}

fn finite_or(v: f64, fallback: f64) -> f64 {
    if v.is_finite() {
        v
    } else {
        fallback
    }
}

/// Advance the world by `dt` seconds under `cmd`.
pub fn step_world(state: &WorldState, cmd: &Command, dt: f64) -> Result<WorldState> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Input(format!("dt must be positive and finite, got {dt}")));
    }
    let mut s = state.clone();
    let ty = finite_or(cmd.y, s.gripper_y).clamp(0.0, WORLD_WIDTH);
    let tz = finite_or(cmd.z, s.gripper_z).clamp(0.0, WORLD_HEIGHT);
    let (dy, dz) = (ty - s.gripper_y, tz - s.gripper_z);
    let dist = dy.hypot(dz);
    let reach = V_MAX * dt;
    if dist <= reach {
        s.gripper_y = ty;
        s.gripper_z = tz;
    } else {
        s.gripper_y += dy * reach / dist;
        s.gripper_z += dz * reach / dist;
    }
    let ta = finite_or(cmd.aperture, s.aperture).clamp(0.0, 1.0);
    let slew = APERTURE_RATE * dt;
    let before = s.aperture;
    s.aperture = if (ta - before).abs() <= slew { ta } else { before + slew.copysign(ta - before) };
    if s.attached.is_none() && before >= 0.5 && s.aperture < 0.5 {
        let pick = (0..CUPS)
            .filter(|&j| s.is_topmost(j))
            .map(|j| (j, (s.cups[j].y - s.gripper_y).hypot(s.cups[j].z - s.gripper_z)))
            .filter(|&(_, d)| d <= GRASP_RADIUS)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        if let Some((j, _)) = pick {
            s.attached = Some(j);
            s.cups[j].support = Support::Held;
        }
    }
    if let Some(j) = s.attached {
        s.cups[j].y = s.gripper_y;
        s.cups[j].z = s.gripper_z;
        if s.aperture > 0.5 {
            s.attached = None;
            s.drop_cup(j);
        }
    }
    s.time += dt;
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RenderLayers {
    pub cups: bool,
    pub gripper: bool,
}

impl Default for RenderLayers {
    fn default() -> Self {
        Self { cups: true, gripper: true }
    }
}

pub fn render(state: &WorldState) -> Tensor<f32> {
    render_layers(state, RenderLayers::default())
}

/// Orthographic raster of the world, `[1, 64, 64]`. Column 0 is y = 0 and
/// row 0 is the top of the world; each pixel samples its center.
pub fn render_layers(state: &WorldState, layers: RenderLayers) -> Tensor<f32> {
    let n = IMAGE_SIZE;
    let mut img = vec![0.0f32; n * n];
    let mut fill = |y0: f64, y1: f64, z0: f64, z1: f64, gray: f32| {
        for r in 0..n {
            let z = WORLD_HEIGHT - (r as f64 + 0.5) * WORLD_HEIGHT / n as f64;
            if z < z0 || z >= z1 {
                continue;
            }
            for c in 0..n {
                let y = (c as f64 + 0.5) * WORLD_WIDTH / n as f64;
                if y >= y0 && y < y1 {
                    img[r * n + c] = gray;
                }
            }
        }
    };
    if layers.cups {
        let mut order: Vec<usize> = (0..CUPS).collect();
        order.sort_by(|&a, &b| state.cups[a].z.total_cmp(&state.cups[b].z).then(a.cmp(&b)));
        for i in order {
            let cup = &state.cups[i];
            fill(
                cup.y - CUP_WIDTH / 2.0,
                cup.y + CUP_WIDTH / 2.0,
                cup.z - CUP_HEIGHT / 2.0,
                cup.z + CUP_HEIGHT / 2.0,
                CUP_GRAY[i],
            );
        }
    }
    if layers.gripper {
        let half_gap = (CUP_WIDTH + state.aperture * CUP_WIDTH) / 2.0;
        let (gy, gz) = (state.gripper_y, state.gripper_z);
        let (z0, z1) = (gz - JAW_HEIGHT / 2.0, gz + JAW_HEIGHT / 2.0);
        fill(gy - half_gap - JAW_WIDTH, gy - half_gap, z0, z1, 1.0);
        fill(gy + half_gap, gy + half_gap + JAW_WIDTH, z0, z1, 1.0);
    }
    Tensor::new(&[1, n, n], img).expect("fixed image shape")
}

/// True iff the cups form the target pyramid and the gripper is open and
/// clear above it.
pub fn check_success(state: &WorldState, task: &TaskSpec) -> bool {
    if state.attached.is_some() || state.aperture <= 0.5 {
        return false;
    }
    let slots = task.slots();
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    PERMS.iter().any(|perm| {
        let near = perm.iter().zip(&slots).all(|(&c, &(y, z))| {
            let cup = &state.cups[c];
            (cup.y - y).hypot(cup.z - z) <= SUCCESS_TOLERANCE
        });
        let top = &state.cups[perm[2]];
        let bridged = match top.support {
            Support::Bridged(a, b) => (a == perm[0] && b == perm[1]) || (a == perm[1] && b == perm[0]),
            _ => false,
        };
        near && bridged && state.gripper_z >= top.z + CUP_HEIGHT / 2.0 + CLEARANCE
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Segment {
    Move { y: f64, z: f64 },
    Grip { aperture: f64 },
}

/// Scripted demonstration for one task, sampled at `steps` ticks.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherScript {
    commands: Vec<Command>,
}

impl TeacherScript {
    pub fn new(task: &TaskSpec, steps: usize, hz: f64) -> Result<Self> {
        if !(hz > 0.0) {
            return Err(Error::Config(format!("hz must be positive, got {hz}")));
        }
        let cy = task.center_y;
        let [left, right, top] = task.slots();
        let cup_z = |i: usize| CUP_HEIGHT / 2.0 + i as f64 * NEST_OFFSET;
        let mv = |y: f64, z: f64| Segment::Move { y, z };
        let grip = |aperture: f64| Segment::Grip { aperture };
        let mut route = vec![mv(cy, cup_z(2)), grip(0.0), mv(cy, TRANSIT_Z)];
        for (slot, next) in [(left, Some(cup_z(1))), (right, Some(cup_z(0))), (top, None)] {
            route.extend([mv(slot.0, TRANSIT_Z), mv(slot.0, slot.1), grip(1.0), mv(slot.0, TRANSIT_Z)]);
            if let Some(z) = next {
                route.extend([mv(cy, TRANSIT_Z), mv(cy, z), grip(0.0), mv(cy, TRANSIT_Z)]);
            }
        }
        // The top slot sits straight below the last transit point.
        let home = task.home();
        route.pop();
        route.push(mv(home.y, home.z));

        let grip_steps = 8.max((0.03 * steps as f64).round() as usize);
        let hold = 5.max(steps / 40);
        let n_grips = route.iter().filter(|s| matches!(s, Segment::Grip { .. })).count();
        let mut lengths = Vec::new();
        let mut at = (home.y, home.z);
        for seg in &route {
            if let Segment::Move { y, z } = *seg {
                lengths.push((y - at.0).hypot(z - at.1));
                at = (y, z);
            }
        }
        let budget = steps
            .checked_sub(1 + hold + n_grips * grip_steps)
            .ok_or_else(|| Error::Config(format!("{steps} steps cannot fit the teacher script")))?;
        let durations = apportion(&lengths, budget, 4)
            .ok_or_else(|| Error::Config(format!("{steps} steps cannot fit the teacher script")))?;

        let mut commands = vec![home];
        let mut cur = home;
        let mut moves = durations.iter().zip(&lengths);
        for seg in &route {
            match *seg {
                Segment::Move { y, z } => {
                    let (&d, _) = moves.next().expect("one duration per move");
                    let from = cur;
                    for k in 1..=d {
                        let s = trapezoid(k as f64 / d as f64);
                        commands.push(Command {
                            y: from.y + (y - from.y) * s,
                            z: from.z + (z - from.z) * s,
                            aperture: from.aperture,
                        });
                    }
                    cur = Command { y, z, ..from };
                }
                Segment::Grip { aperture } => {
                    let from = cur;
                    for k in 1..=grip_steps {
                        let s = k as f64 / grip_steps as f64;
                        commands.push(Command { aperture: from.aperture + (aperture - from.aperture) * s, ..from });
                    }
                    cur = Command { aperture, ..from };
                }
            }
            *commands.last_mut().expect("non-empty") = cur;
        }
        commands.resize(steps, cur);
        let script = Self { commands };
        let peak = script.peak_speed(hz);
        if peak > TEACHER_MAX_SPEED + 1e-12 {
            return Err(Error::Config(format!(
                "{steps} steps at {hz} Hz need {peak:.3} m/s, above the {TEACHER_MAX_SPEED} m/s ceiling"
            )));
        }
        Ok(script)
    }

    pub fn len(&self) -> usize {
        self.commands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.commands.is_empty()
    }

    pub fn command(&self, t: usize) -> Result<Command> {
        self.commands
            .get(t)
            .copied()
            .ok_or_else(|| Error::Input(format!("teacher step {t} outside [0, {})", self.commands.len())))
    }

    pub fn commands(&self) -> &[Command] {
        &self.commands
    }

    /// Largest commanded Cartesian speed between consecutive ticks.
    pub fn peak_speed(&self, hz: f64) -> f64 {
        self.commands.windows(2).map(|w| (w[1].y - w[0].y).hypot(w[1].z - w[0].z) * hz).fold(0.0, f64::max)
    }
}

/// Single teacher command; builds the whole script each call.
pub fn teacher_policy(task: &TaskSpec, t: usize, steps: usize, hz: f64) -> Result<Command> {
    TeacherScript::new(task, steps, hz)?.command(t)
}

/// Normalized position along a trapezoidal velocity profile with quarter-length
/// ramps.
fn trapezoid(tau: f64) -> f64 {
    let tau = tau.clamp(0.0, 1.0);
    if tau < 0.25 {
        8.0 / 3.0 * tau * tau
    } else if tau <= 0.75 {
        1.0 / 6.0 + 4.0 / 3.0 * (tau - 0.25)
    } else {
        1.0 - 8.0 / 3.0 * (1.0 - tau) * (1.0 - tau)
    }
}

/// Split `budget` steps in proportion to `weights`, at least `min` each;
/// leftover steps go to the largest remainders, lower index first.
fn apportion(weights: &[f64], budget: usize, min: usize) -> Option<Vec<usize>> {
    let total: f64 = weights.iter().sum();
    if budget < min * weights.len() || total <= 0.0 {
        return None;
    }
    let share: Vec<f64> = weights.iter().map(|w| budget as f64 * w / total).collect();
    let mut out: Vec<usize> = share.iter().map(|s| (s.floor() as usize).max(min)).collect();
    let mut used: usize = out.iter().sum();
    while used > budget {
        let i = (0..out.len()).filter(|&i| out[i] > min).max_by(|&a, &b| out[a].cmp(&out[b]).then(b.cmp(&a)))?;
        out[i] -= 1;
        used -= 1;
    }
    let mut order: Vec<usize> = (0..out.len()).collect();
    order.sort_by(|&a, &b| (share[b] - out[b] as f64).total_cmp(&(share[a] - out[a] as f64)).then(a.cmp(&b)));
    for &i in order.iter().cycle().take(budget - used) {
        out[i] += 1;
    }
    Some(out)
}

/// Frames and commands of one rollout. `frames[t]` is rendered before
/// `commands[t]` is applied.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub frames: Vec<Tensor<f32>>,
    pub commands: Vec<Command>,
    pub final_state: WorldState,
}

/// Execute the teacher script through the world at `speed` times the
/// teaching rate.
pub fn run_teacher(task: &TaskSpec, steps: usize, hz: f64, speed: f64) -> Result<Rollout> {
    let script = TeacherScript::new(task, steps, hz)?;
    let dt = 1.0 / (speed * hz);
    let mut state = task.initial_state();
    let mut frames = Vec::with_capacity(steps);
    for cmd in script.commands() {
        frames.push(render(&state));
        state = step_world(&state, cmd, dt)?;
    }
    Ok(Rollout { frames, commands: script.commands, final_state: state })
}
