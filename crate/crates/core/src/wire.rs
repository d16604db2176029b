//! Little-endian framing shared by episode and checkpoint files.

use crate::error::FormatError;

pub(crate) fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Length-prefixed block.
pub(crate) fn put_block(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u32(out, bytes.len() as u32);
    out.extend_from_slice(bytes);
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated { field: field.into() });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<(), FormatError> {
        let found = self.take(4, "magic")?;
        if found != expected {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self, field: &str) -> Result<u32, FormatError> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes(b.try_into().expect("four bytes")))
    }

    pub(crate) fn version(&mut self, expected: u32) -> Result<(), FormatError> {
        let found = self.u32("version")?;
        if found != expected {
            return Err(FormatError::Version { expected, found });
        }
        Ok(())
    }

    pub(crate) fn block(&mut self, field: &str) -> Result<&'a [u8], FormatError> {
        let len = self.u32(&format!("{field} length"))? as usize;
        self.take(len, field)
    }

    pub(crate) fn f32s(&mut self, count: usize, field: &str) -> Result<Vec<f32>, FormatError> {
        let bytes = count.checked_mul(4).ok_or_else(|| FormatError::Corrupt {
            field: field.into(),
            detail: format!("element count {count} overflows"),
        })?;
        let raw = self.take(bytes, field)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect())
    }

    pub(crate) fn finish(self) -> Result<(), FormatError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            n => Err(FormatError::TrailingBytes(n)),
        }
    }
}

/// Canonical JSON: `serde_json::Value` objects keep their keys sorted.
pub(crate) fn canonical_json<S: serde::Serialize>(value: &S) -> Vec<u8> {
    let v = serde_json::to_value(value).expect("serializable header");
    serde_json::to_vec(&v).expect("json encoding")
}

pub(crate) fn parse_json<D: serde::de::DeserializeOwned>(bytes: &[u8], field: &str) -> Result<D, FormatError> {
    serde_json::from_slice(bytes).map_err(|e| FormatError::Corrupt { field: field.into(), detail: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn short_buffer_names_field() {
        let mut r = Reader::new(&[1, 0]);
        assert_eq!(r.u32("steps"), Err(FormatError::Truncated { field: "steps".into() }));
    }

    #[test]
    fn canonical_json_sorts_keys() {
        #[derive(serde::Serialize)]
        struct H {
            zeta: u8,
            alpha: u8,
        }
        assert_eq!(canonical_json(&H { zeta: 1, alpha: 2 }), br#"{"alpha":2,"zeta":1}"#);
    }
}
