//! Text ingestion: vocabulary, tokenization, windowing, and the length
//! distribution used to pick a sequence length before filling it in.

mod length;
pub mod synthetic;
mod vocab;

use std::path::{Path, PathBuf};

pub use length::{estimate_length_dist, LengthDistribution, LengthPrior, PointMass};
pub use vocab::{build_vocab, TokenizerMode, Vocab, MASK_TEXT, UNK_GLYPH};

use crate::{Error, Result, TokenId};

/// A non-empty run of token ids, free of PAD.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<TokenId>);

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        if ids.contains(&Vocab::PAD) {
            return Err(Error::InvalidArgument("token sequence contains PAD".into()));
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_ids(self) -> Vec<TokenId> {
        self.0
    }

    /// Check every id against a vocabulary size.
    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        match self.0.iter().find(|&&id| id as usize >= vocab_size) {
            Some(&id) => Err(Error::TokenOutOfRange {
                id,
                size: vocab_size,
            }),
            None => Ok(()),
        }
    }
}

/// Split a token stream into consecutive windows. Every window but the last
/// has exactly `window` tokens; the tail is kept when non-empty.
pub fn chunk(stream: &[TokenId], window: usize) -> Result<Vec<TokenSequence>> {
    if window == 0 {
        return Err(Error::InvalidArgument("window must be at least 1".into()));
    }
    stream
        .chunks(window)
        .map(|c| TokenSequence::new(c.to_vec()))
        .collect()
}

/// Chunk each document separately so no window spans a document boundary.
pub fn chunk_documents(docs: &[Vec<TokenId>], window: usize) -> Result<Vec<TokenSequence>> {
    let mut out = Vec::new();
    for doc in docs {
        out.extend(chunk(doc, window)?);
    }
    Ok(out)
}

/// Read documents from a file (one document) or a directory (one document
/// per regular file, in file-name order).
pub fn read_documents(path: &Path) -> Result<Vec<String>> {
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    let files: Vec<PathBuf> = if meta.is_dir() {
        let mut files = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(path, e)))
            .collect::<Result<Vec<_>>>()?;
        files.retain(|p| p.is_file());
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    let docs = files
        .iter()
        .map(|f| std::fs::read_to_string(f).map_err(|e| Error::io(f, e)))
        .collect::<Result<Vec<_>>>()?;
    if docs.iter().all(|d| d.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    Ok(docs)
}

/// Tokenize every document and window it.
pub fn load_sequences(docs: &[String], vocab: &Vocab, window: usize) -> Result<Vec<TokenSequence>> {
    let streams: Vec<Vec<TokenId>> = docs
        .iter()
        .filter(|d| !vocab.tokenize(d).is_empty())
        .map(|d| vocab.encode(d).map(TokenSequence::into_ids))
        .collect::<Result<_>>()?;
    chunk_documents(&streams, window)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn chunk_lengths() {
        let lens = |n: u32, w| {
            let s: Vec<u32> = (4..4 + n).collect();
            chunk(&s, w).unwrap().iter().map(TokenSequence::len).collect::<Vec<_>>()
        };
        assert_eq!(lens(10, 4), vec![4, 4, 2]);
        assert_eq!(lens(4, 4), vec![4]);
        assert_eq!(lens(3, 4), vec![3]);
        assert!(chunk(&[4, 5], 0).is_err());
    }

    #[test]
    fn token_sequence_rejects_empty_and_pad() {
        assert!(matches!(TokenSequence::new(vec![]), Err(Error::EmptySequence)));
        assert!(TokenSequence::new(vec![5, Vocab::PAD]).is_err());
        let s = TokenSequence::new(vec![5, 9]).unwrap();
        assert!(s.check_vocab(9).is_err());
        assert!(s.check_vocab(10).is_ok());
    }

    #[test]
    fn documents_do_not_share_windows() {
        let docs = vec![vec![4, 5, 6], vec![7, 8]];
        let chunks = chunk_documents(&docs, 2).unwrap();
        let ids: Vec<Vec<u32>> = chunks.into_iter().map(TokenSequence::into_ids).collect();
        assert_eq!(ids, vec![vec![4, 5], vec![6], vec![7, 8]]);
    }

    #[test]
    fn read_documents_from_dir_in_name_order() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("b.txt"), "second").unwrap();
        std::fs::write(dir.path().join("a.txt"), "first").unwrap();
        let docs = read_documents(dir.path()).unwrap();
        assert_eq!(docs, vec!["first".to_string(), "second".to_string()]);
        let missing = read_documents(&dir.path().join("nope")).unwrap_err();
        assert!(missing.to_string().contains("nope"));
    }

    proptest! {
        #[test]
        fn chunk_partitions_the_stream(
            stream in proptest::collection::vec(4u32..50, 0..200),
            window in 1usize..40,
        ) {
            let chunks = chunk(&stream, window).unwrap();
            let joined: Vec<u32> = chunks.iter().flat_map(|c| c.ids().to_vec()).collect();
            prop_assert_eq!(&joined, &stream);
            if let Some((last, body)) = chunks.split_last() {
                prop_assert!(body.iter().all(|c| c.len() == window));
                prop_assert!(last.len() >= 1 && last.len() <= window);
            }
        }
    }
}
