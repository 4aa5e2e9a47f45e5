//! Plain text state, indexed by Unicode scalar value.

use std::fmt;

use thiserror::Error;

use crate::replay::TransformedOp;

const CHUNK: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DocumentError {
    #[error("index {pos} out of range for document of length {len}{}", op_suffix(*.op_index))]
    IndexOutOfRange { pos: usize, len: usize, op_index: Option<usize> },
}

fn op_suffix(op_index: Option<usize>) -> String {
    op_index.map(|i| format!(" (op #{i})")).unwrap_or_default()
}

/// Text kept as a list of bounded chunks, so edits cost O(chunk + chunks).
#[derive(Clone, Default, PartialEq, Eq)]
pub struct Document {
    chunks: Vec<Vec<char>>,
    len: usize,
}

impl Document {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn locate(&self, mut pos: usize) -> (usize, usize) {
        for (i, c) in self.chunks.iter().enumerate() {
            if pos < c.len() {
                return (i, pos);
            }
            pos -= c.len();
        }
        (self.chunks.len(), 0)
    }

    pub fn insert(&mut self, pos: usize, c: char) -> Result<(), DocumentError> {
        if pos > self.len {
            return Err(DocumentError::IndexOutOfRange { pos, len: self.len, op_index: None });
        }
        let (mut chunk, mut offset) = self.locate(pos);
        // Appending goes onto the end of the last chunk rather than a new one.
        if chunk == self.chunks.len() {
            if let Some(last) = self.chunks.last() {
                chunk -= 1;
                offset = last.len();
            } else {
                self.chunks.push(Vec::with_capacity(CHUNK));
            }
        }
        let target = &mut self.chunks[chunk];
        target.insert(offset, c);
        if target.len() > CHUNK {
            let tail = target.split_off(CHUNK / 2);
            self.chunks.insert(chunk + 1, tail);
        }
        self.len += 1;
        Ok(())
    }

    pub fn delete(&mut self, pos: usize) -> Result<char, DocumentError> {
        if pos >= self.len {
            return Err(DocumentError::IndexOutOfRange { pos, len: self.len, op_index: None });
        }
        let (chunk, offset) = self.locate(pos);
        let c = self.chunks[chunk].remove(offset);
        if self.chunks[chunk].is_empty() {
            self.chunks.remove(chunk);
        }
        self.len -= 1;
        Ok(c)
    }

    pub fn apply_op(&mut self, op: &TransformedOp) -> Result<(), DocumentError> {
        match *op {
            TransformedOp::Insert { pos, content, .. } => self.insert(pos, content),
            TransformedOp::Delete { pos, .. } => self.delete(pos).map(|_| ()),
            TransformedOp::Noop { .. } => Ok(()),
        }
    }

    /// Applies `ops` in order, stopping at the first one that does not fit.
    pub fn apply_all<'a>(&mut self, ops: impl IntoIterator<Item = &'a TransformedOp>) -> Result<(), DocumentError> {
        for (i, op) in ops.into_iter().enumerate() {
            self.apply_op(op).map_err(|DocumentError::IndexOutOfRange { pos, len, .. }| {
                DocumentError::IndexOutOfRange { pos, len, op_index: Some(i) }
            })?;
        }
        Ok(())
    }

    pub fn chars(&self) -> impl Iterator<Item = char> + '_ {
        self.chunks.iter().flatten().copied()
    }

    pub fn snapshot_text(&self) -> Vec<u8> {
        self.to_string().into_bytes()
    }
}

impl From<&str> for Document {
    fn from(s: &str) -> Self {
        let chars: Vec<char> = s.chars().collect();
        let len = chars.len();
        Document { chunks: chars.chunks(CHUNK / 2).map(|c| c.to_vec()).collect(), len }
    }
}

impl fmt::Display for Document {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = self.chars().collect();
        f.write_str(&s)
    }
}

impl fmt::Debug for Document {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Document({:?})", self.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ins(pos: usize, c: char) -> TransformedOp {
        TransformedOp::Insert { pos, content: c, source: 0 }
    }

    #[test]
    fn insert_completes_hello() {
        let mut d = Document::from("Helo");
        d.apply_op(&ins(3, 'l')).unwrap();
        assert_eq!(d.to_string(), "Hello");
    }

    #[test]
    fn noop_on_empty() {
        let mut d = Document::new();
        d.apply_op(&TransformedOp::Noop { source: 0 }).unwrap();
        assert_eq!(d.to_string(), "");
        d.apply_all(&[]).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn insert_then_delete_restores() {
        let mut d = Document::from("abc");
        d.insert(1, 'x').unwrap();
        assert_eq!(d.delete(1).unwrap(), 'x');
        assert_eq!(d.to_string(), "abc");
    }

    #[test]
    fn out_of_range_reports_op_index() {
        let mut d = Document::new();
        let err = d.apply_all(&[ins(0, 'a'), TransformedOp::Delete { pos: 3, source: 1 }]).unwrap_err();
        assert_eq!(err, DocumentError::IndexOutOfRange { pos: 3, len: 1, op_index: Some(1) });
    }

    #[test]
    fn snapshot_is_utf8() {
        assert_eq!(Document::from("Hey!").snapshot_text(), vec![0x48, 0x65, 0x79, 0x21]);
        assert!(Document::new().snapshot_text().is_empty());
        let astral = Document::from("😀");
        assert_eq!(astral.len(), 1);
        assert_eq!(astral.snapshot_text().len(), 4);
    }

    proptest! {
        #[test]
        fn matches_a_vec(ops in prop::collection::vec((any::<u16>(), any::<bool>(), any::<char>()), 0..3000)) {
            let mut d = Document::new();
            let mut model: Vec<char> = Vec::new();
            for (a, del, c) in ops {
                if del && !model.is_empty() {
                    let pos = a as usize % model.len();
                    prop_assert_eq!(d.delete(pos).unwrap(), model.remove(pos));
                } else {
                    let pos = a as usize % (model.len() + 1);
                    d.insert(pos, c).unwrap();
                    model.insert(pos, c);
                }
                prop_assert_eq!(d.len(), model.len());
            }
            prop_assert_eq!(d.chars().collect::<Vec<_>>(), model);
        }
    }
}
