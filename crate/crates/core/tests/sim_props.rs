use hsarnn::harness::{run_closed_loop, run_trial, Controller, LoopConfig};
use hsarnn::stacksim::{
    render, step_world, Command, Position, TaskSpec, APERTURE_RATE, TEACHER_MAX_SPEED, V_MAX, WORLD_HEIGHT, WORLD_WIDTH,
};
use proptest::prelude::*;

fn loop_cfg(steps: usize, speed: f64) -> LoopConfig {
    LoopConfig { steps, hz: 10.0, speed, noise: 0.0, trials: 2, seed: 4, jitter: 0.01 }
}

fn command() -> impl Strategy<Value = Command> {
    (-0.2f64..0.7, -0.2f64..0.5, -0.5f64..1.5).prop_map(|(y, z, aperture)| Command { y, z, aperture })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn world_stays_bounded(pos in 0usize..5, cmds in prop::collection::vec(command(), 1..60), speed in 1.0f64..4.0) {
        let task = TaskSpec::new(Position::ALL[pos]);
        let dt = 1.0 / (speed * 10.0);
        let mut s = task.initial_state();
        for (i, c) in cmds.iter().enumerate() {
            let next = step_world(&s, c, dt).unwrap();
            let moved = (next.gripper_y - s.gripper_y).hypot(next.gripper_z - s.gripper_z);
            prop_assert!(moved <= V_MAX * dt + 1e-12);
            prop_assert!((next.aperture - s.aperture).abs() <= APERTURE_RATE * dt + 1e-12);
            prop_assert!((0.0..=WORLD_WIDTH).contains(&next.gripper_y));
            prop_assert!((0.0..=WORLD_HEIGHT).contains(&next.gripper_z));
            prop_assert!((0.0..=1.0).contains(&next.aperture));
            prop_assert!(next.supports_are_closed());
            prop_assert!((next.time - (i + 1) as f64 * dt).abs() < 1e-9);
            s = next;
        }
        let img = render(&s);
        prop_assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn stepping_is_deterministic(cmds in prop::collection::vec(command(), 1..30)) {
        let task = TaskSpec::new(Position::B);
        let run = || cmds.iter().try_fold(task.initial_state(), |s, c| step_world(&s, c, 0.1)).unwrap();
        prop_assert_eq!(run(), run());
    }
}

#[test]
fn speed_three_spans_a_third_of_the_sim_time() {
    let at = |speed| run_trial(&Controller::Teacher, Position::C, 0, &loop_cfg(400, speed)).unwrap();
    let (slow, fast) = (at(1.0), at(3.0));
    assert!((slow.sim_time - 40.0).abs() < 1e-9, "{}", slow.sim_time);
    assert!((fast.sim_time - 400.0 / 30.0).abs() < 1e-9, "{}", fast.sim_time);
    assert_eq!(fast.trajectory.len(), 400);
}

#[test]
fn teacher_script_stays_under_its_speed_limit_everywhere() {
    for p in Position::ALL {
        let script = hsarnn::stacksim::TeacherScript::new(&TaskSpec::new(p), 400, 10.0).unwrap();
        assert!(script.peak_speed(10.0) <= TEACHER_MAX_SPEED + 1e-12, "{p}");
    }
}

#[test]
fn closed_loop_is_deterministic_and_jitter_varies_trials() {
    let cfg = loop_cfg(200, 3.0);
    let a = run_closed_loop(&Controller::Teacher, Position::D, &cfg).unwrap();
    let b = run_closed_loop(&Controller::Teacher, Position::D, &cfg).unwrap();
    assert_eq!(a, b);
    assert_ne!(a[0].offset, a[1].offset);
    assert!(a.iter().all(|t| t.offset.abs() <= 0.01));
}

#[test]
fn invalid_loop_settings_are_rejected() {
    for bad in [loop_cfg(10, 0.5), loop_cfg(0, 1.0), LoopConfig { noise: -1.0, ..loop_cfg(10, 1.0) }] {
        assert!(run_trial(&Controller::Teacher, Position::A, 0, &bad).is_err());
    }
}
