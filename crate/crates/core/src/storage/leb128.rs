//! Unsigned LEB128 varints and zigzag signed mapping.

use thiserror::Error;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum VarintError {
    #[error("input ended inside a value")]
    Truncated,
    #[error("varint does not fit in 64 bits")]
    Overflow,
}

pub fn write_u64(out: &mut Vec<u8>, mut v: u64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

pub fn write_usize(out: &mut Vec<u8>, v: usize) {
    write_u64(out, v as u64);
}

pub fn zigzag(v: i64) -> u64 {
    ((v << 1) ^ (v >> 63)) as u64
}

pub fn unzigzag(v: u64) -> i64 {
    ((v >> 1) as i64) ^ -((v & 1) as i64)
}

/// Cursor over a byte slice.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn read_u8(&mut self) -> Result<u8, VarintError> {
        let b = *self.buf.get(self.pos).ok_or(VarintError::Truncated)?;
        self.pos += 1;
        Ok(b)
    }

    pub fn read_u64(&mut self) -> Result<u64, VarintError> {
        let mut v = 0u64;
        for shift in (0..64).step_by(7) {
            let b = self.read_u8()?;
            let bits = (b & 0x7f) as u64;
            if shift == 63 && bits > 1 {
                return Err(VarintError::Overflow);
            }
            v |= bits << shift;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(VarintError::Overflow)
    }

    pub fn read_usize(&mut self) -> Result<usize, VarintError> {
        usize::try_from(self.read_u64()?).map_err(|_| VarintError::Overflow)
    }

    pub fn read_bytes(&mut self, n: usize) -> Result<&'a [u8], VarintError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(VarintError::Truncated)?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn enc(v: u64) -> Vec<u8> {
        let mut out = Vec::new();
        write_u64(&mut out, v);
        out
    }

    #[test]
    fn known_encodings() {
        assert_eq!(enc(0), [0x00]);
        assert_eq!(enc(127), [0x7f]);
        assert_eq!(enc(128), [0x80, 0x01]);
        assert_eq!(enc(300), [0xac, 0x02]);
        assert_eq!(enc(u64::MAX).len(), 10);
    }

    #[test]
    fn zigzag_small_magnitudes_stay_small() {
        assert_eq!(zigzag(0), 0);
        assert_eq!(zigzag(-1), 1);
        assert_eq!(zigzag(1), 2);
        assert_eq!(zigzag(-2), 3);
        assert_eq!(unzigzag(zigzag(i64::MIN)), i64::MIN);
    }

    #[test]
    fn truncated_and_overflowing_input() {
        assert_eq!(Reader::new(&[0x80]).read_u64(), Err(VarintError::Truncated));
        let eleven = [0xff; 11];
        assert_eq!(Reader::new(&eleven).read_u64(), Err(VarintError::Overflow));
        let mut r = Reader::new(&[1, 2]);
        assert_eq!(r.read_bytes(3), Err(VarintError::Truncated));
    }

    proptest! {
        #[test]
        fn roundtrip(v in any::<u64>(), s in any::<i64>()) {
            let mut buf = enc(v);
            write_u64(&mut buf, zigzag(s));
            let mut r = Reader::new(&buf);
            prop_assert_eq!(r.read_u64().unwrap(), v);
            prop_assert_eq!(unzigzag(r.read_u64().unwrap()), s);
            prop_assert!(r.is_empty());
        }
    }
}
