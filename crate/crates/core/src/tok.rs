//! Deterministic byte-level tokenizers with per-token end offsets.
//!
//! Two kinds share one vocabulary layout: ids `0..256` are the raw bytes,
//! `256..260` are the specials (bos, eos, pad, unk) and merged pieces follow.
//! The char kind stops there; the merge kind learns pair merges from a
//! corpus and tokenizes by greedy longest match over its pieces.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub const NUM_BYTES: usize = 256;
pub const NUM_SPECIALS: usize = 4;

#[derive(Debug, Error)]
pub enum TokError {
    #[error("vocabulary corpus is empty")]
    EmptyCorpus,
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("vocabulary file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("cannot concatenate tokenizations of different vocabularies")]
    Mismatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenizerKind {
    /// One token per byte.
    Char,
    /// Byte-pair merges learned by pair frequency.
    Merge,
}

impl TokenizerKind {
    pub fn name(self) -> &'static str {
        match self {
            TokenizerKind::Char => "char",
            TokenizerKind::Merge => "merge",
        }
    }
}

impl std::str::FromStr for TokenizerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "char" => Ok(TokenizerKind::Char),
            "merge" => Ok(TokenizerKind::Merge),
            other => Err(format!("unknown tokenizer kind '{other}' (expected char|merge)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub bos: usize,
    pub eos: usize,
    pub pad: usize,
    pub unk: usize,
}

const SPECIAL_NAMES: [&str; NUM_SPECIALS] = ["bos", "eos", "pad", "unk"];

impl SpecialIds {
    fn standard() -> Self {
        SpecialIds {
            bos: NUM_BYTES,
            eos: NUM_BYTES + 1,
            pad: NUM_BYTES + 2,
            unk: NUM_BYTES + 3,
        }
    }

    pub fn contains(&self, id: usize) -> bool {
        id == self.bos || id == self.eos || id == self.pad || id == self.unk
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    kind: TokenizerKind,
    /// Piece bytes per id; specials hold an empty piece.
    id_to_piece: Vec<Vec<u8>>,
    /// Inverse of `id_to_piece` over the ordinary (non-special) pieces.
    piece_to_id: HashMap<Vec<u8>, usize>,
    specials: SpecialIds,
    merges: Vec<(usize, usize)>,
    max_piece_len: usize,
}

/// Token ids of one text plus the exclusive end byte offset of every token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenization {
    pub ids: Vec<usize>,
    pub end_offsets: Vec<usize>,
    pub text: String,
}

impl Tokenization {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Start offset of token `i`.
    pub fn start_offset(&self, i: usize) -> usize {
        if i == 0 {
            0
        } else {
            self.end_offsets[i - 1]
        }
    }

    /// Appends `other` (tokenized separately) so that the seam is a token
    /// boundary in the result.
    pub fn concat(&self, other: &Tokenization) -> Tokenization {
        let shift = self.text.len();
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        let mut end_offsets = self.end_offsets.clone();
        end_offsets.extend(other.end_offsets.iter().map(|o| o + shift));
        Tokenization {
            ids,
            end_offsets,
            text: format!("{}{}", self.text, other.text),
        }
    }
}

fn base_pieces() -> Vec<Vec<u8>> {
    let mut pieces: Vec<Vec<u8>> = (0..NUM_BYTES).map(|b| vec![b as u8]).collect();
    pieces.extend(std::iter::repeat(Vec::new()).take(NUM_SPECIALS));
    pieces
}

/// Merges every non-overlapping `(left, right)` occurrence, scanning left to right.
fn apply_merge(seq: &mut Vec<usize>, left: usize, right: usize, merged: usize) {
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == left && seq[i + 1] == right {
            out.push(merged);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    *seq = out;
}

impl Vocabulary {
    /// Builds a vocabulary from a corpus.
    ///
    /// The merge kind repeatedly merges the most frequent adjacent pair (ties
    /// broken by the lexicographic order of the pair's byte strings) until
    /// `num_merges` merges are learned or no pair occurs at least twice.
    /// The char kind ignores `num_merges`.
    pub fn build(corpus: &[impl AsRef<str>], kind: TokenizerKind, num_merges: usize) -> Result<Self, TokError> {
        if corpus.is_empty() {
            return Err(TokError::EmptyCorpus);
        }
        let mut vocab = Vocabulary::from_parts(kind, base_pieces(), Vec::new());
        if kind == TokenizerKind::Char {
            return Ok(vocab);
        }
        let mut seqs: Vec<Vec<usize>> = corpus
            .iter()
            .map(|line| line.as_ref().bytes().map(usize::from).collect())
            .collect();
        for _ in 0..num_merges {
            let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
            for seq in &seqs {
                for w in seq.windows(2) {
                    *counts.entry((w[0], w[1])).or_insert(0) += 1;
                }
            }
            let best = counts
                .iter()
                .filter(|(_, &c)| c >= 2)
                .max_by(|(pa, ca), (pb, cb)| {
                    ca.cmp(cb).then_with(|| {
                        // lexicographically smaller pair wins the tie
                        let ka = (&vocab.id_to_piece[pa.0], &vocab.id_to_piece[pa.1]);
                        let kb = (&vocab.id_to_piece[pb.0], &vocab.id_to_piece[pb.1]);
                        kb.cmp(&ka)
                    })
                })
                .map(|(&p, _)| p);
            let Some((left, right)) = best else { break };
            let merged = vocab.push_merge(left, right);
            for seq in &mut seqs {
                apply_merge(seq, left, right, merged);
            }
        }
        Ok(vocab)
    }

    fn from_parts(kind: TokenizerKind, id_to_piece: Vec<Vec<u8>>, merges: Vec<(usize, usize)>) -> Self {
        let specials = SpecialIds::standard();
        let piece_to_id: HashMap<Vec<u8>, usize> = id_to_piece
            .iter()
            .enumerate()
            .filter(|(id, _)| !specials.contains(*id))
            .map(|(id, p)| (p.clone(), id))
            .collect();
        let max_piece_len = id_to_piece.iter().map(Vec::len).max().unwrap_or(1);
        Vocabulary {
            kind,
            id_to_piece,
            piece_to_id,
            specials,
            merges,
            max_piece_len,
        }
    }

    /// Records a merge and returns the id of the merged piece, reusing an
    /// existing id when the bytes are already a piece.
    fn push_merge(&mut self, left: usize, right: usize) -> usize {
        let mut bytes = self.id_to_piece[left].clone();
        bytes.extend_from_slice(&self.id_to_piece[right]);
        self.merges.push((left, right));
        if let Some(&id) = self.piece_to_id.get(&bytes) {
            return id;
        }
        let id = self.id_to_piece.len();
        self.max_piece_len = self.max_piece_len.max(bytes.len());
        self.piece_to_id.insert(bytes.clone(), id);
        self.id_to_piece.push(bytes);
        id
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.id_to_piece.len()
    }

    pub fn specials(&self) -> SpecialIds {
        self.specials
    }

    pub fn merges(&self) -> &[(usize, usize)] {
        &self.merges
    }

    pub fn piece(&self, id: usize) -> Option<&[u8]> {
        self.id_to_piece.get(id).map(Vec::as_slice)
    }

    pub fn id_of(&self, piece: &[u8]) -> Option<usize> {
        self.piece_to_id.get(piece).copied()
    }

    /// Human-readable form of a piece (specials as `<name>`).
    pub fn display_piece(&self, id: usize) -> String {
        if let Some(i) = [self.specials.bos, self.specials.eos, self.specials.pad, self.specials.unk]
            .iter()
            .position(|&s| s == id)
        {
            return format!("<{}>", SPECIAL_NAMES[i]);
        }
        self.piece(id)
            .map(|p| String::from_utf8_lossy(p).into_owned())
            .unwrap_or_default()
    }

    /// Greedy longest-match tokenization; offsets are produced while scanning.
    pub fn tokenize(&self, text: &str) -> Tokenization {
        let bytes = text.as_bytes();
        let mut ids = Vec::new();
        let mut end_offsets = Vec::new();
        let mut pos = 0;
        while pos < bytes.len() {
            let longest = self.max_piece_len.min(bytes.len() - pos);
            let found = (1..=longest)
                .rev()
                .find_map(|len| self.piece_to_id.get(&bytes[pos..pos + len]).map(|&id| (id, len)));
            let (id, len) = found.unwrap_or((self.specials.unk, 1));
            pos += len;
            ids.push(id);
            end_offsets.push(pos);
        }
        Tokenization {
            ids,
            end_offsets,
            text: text.to_owned(),
        }
    }

    pub fn decode_bytes(&self, ids: &[usize]) -> Result<Vec<u8>, TokError> {
        let mut out = Vec::new();
        for &id in ids {
            let piece = self.piece(id).ok_or(TokError::IdOutOfRange { id, size: self.size() })?;
            out.extend_from_slice(piece);
        }
        Ok(out)
    }

    /// Concatenates pieces; specials decode to nothing. Invalid UTF-8 (only
    /// reachable from generated ids) is replaced lossily.
    pub fn decode(&self, ids: &[usize]) -> Result<String, TokError> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    /// Text serialization; see [`Vocabulary::parse`] for the grammar.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        out.push_str("# dskd vocabulary v1\n");
        let _ = writeln!(out, "kind {}", self.kind.name());
        let _ = writeln!(out, "pieces {}", self.size());
        for (id, piece) in self.id_to_piece.iter().enumerate() {
            if self.specials.contains(id) {
                let _ = writeln!(out, "{id}\t-");
            } else {
                let _ = writeln!(out, "{id}\t{}", escape_piece(piece));
            }
        }
        let _ = writeln!(out, "merges {}", self.merges.len());
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l}\t{r}");
        }
        out.push_str("specials\n");
        for (name, id) in SPECIAL_NAMES.iter().zip([
            self.specials.bos,
            self.specials.eos,
            self.specials.pad,
            self.specials.unk,
        ]) {
            let _ = writeln!(out, "{name}\t{id}");
        }
        out
    }

    /// Parses the format written by [`Vocabulary::serialize`]:
    ///
    /// ```text
    /// # comment lines are ignored
    /// kind <char|merge>
    /// pieces <N>
    /// <id>\t<escaped piece>     (N lines, ids 0..N in order; specials as "-")
    /// merges <M>
    /// <left id>\t<right id>     (M lines, in learning order)
    /// specials
    /// bos\t256
    /// eos\t257
    /// pad\t258
    /// unk\t259
    /// ```
    ///
    /// Piece escaping: bytes `0x21..=0x7e` other than `\` are literal, `\` is
    /// written `\\`, every other byte is `\xHH`.
    pub fn parse(src: &str) -> Result<Self, TokError> {
        let mut lines = src
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty());
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| TokError::Parse {
                line: 0,
                msg: format!("unexpected end of file, expected {what}"),
            })
        };
        let perr = |line: usize, msg: String| TokError::Parse { line, msg };

        let (ln, l) = next("kind")?;
        let kind: TokenizerKind = l
            .strip_prefix("kind ")
            .ok_or_else(|| perr(ln, "expected 'kind'".into()))?
            .parse()
            .map_err(|e| perr(ln, e))?;
        let (ln, l) = next("pieces")?;
        let n: usize = l
            .strip_prefix("pieces ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| perr(ln, "expected 'pieces <N>'".into()))?;
        let specials = SpecialIds::standard();
        let mut pieces = Vec::with_capacity(n);
        for expected in 0..n {
            let (ln, l) = next("piece")?;
            let (id, body) = l.split_once('\t').ok_or_else(|| perr(ln, "expected '<id>\\t<piece>'".into()))?;
            if id.parse::<usize>().ok() != Some(expected) {
                return Err(perr(ln, format!("expected id {expected}")));
            }
            if specials.contains(expected) {
                pieces.push(Vec::new());
            } else {
                pieces.push(unescape_piece(body).map_err(|m| perr(ln, m))?);
            }
        }
        if n < NUM_BYTES + NUM_SPECIALS || pieces[..NUM_BYTES].iter().enumerate().any(|(b, p)| p != &[b as u8]) {
            return Err(perr(0, "first 256 pieces must be the single bytes".into()));
        }
        let (ln, l) = next("merges")?;
        let m: usize = l
            .strip_prefix("merges ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| perr(ln, "expected 'merges <M>'".into()))?;
        let mut merges = Vec::with_capacity(m);
        for _ in 0..m {
            let (ln, l) = next("merge")?;
            let pair = l
                .split_once('\t')
                .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
                .ok_or_else(|| perr(ln, "expected '<left>\\t<right>'".into()))?;
            if pair.0 >= n || pair.1 >= n {
                return Err(perr(ln, "merge id out of range".into()));
            }
            merges.push(pair);
        }
        let (ln, l) = next("specials")?;
        if l != "specials" {
            return Err(perr(ln, "expected 'specials'".into()));
        }
        for (name, id) in SPECIAL_NAMES.iter().zip([specials.bos, specials.eos, specials.pad, specials.unk]) {
            let (ln, l) = next(name)?;
            if l != format!("{name}\t{id}") {
                return Err(perr(ln, format!("expected '{name}\\t{id}'")));
            }
        }
        let vocab = Vocabulary::from_parts(kind, pieces, merges);
        if vocab.piece_to_id.len() != n - NUM_SPECIALS {
            return Err(perr(0, "duplicate pieces".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokError> {
        std::fs::write(path, self.serialize())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

fn escape_piece(piece: &[u8]) -> String {
    let mut s = String::new();
    for &b in piece {
        match b {
            b'\\' => s.push_str("\\\\"),
            0x21..=0x7e => s.push(b as char),
            _ => {
                let _ = write!(s, "\\x{b:02x}");
            }
        }
    }
    s
}

fn unescape_piece(s: &str) -> Result<Vec<u8>, String> {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\\' {
            match bytes.get(i + 1) {
                Some(b'\\') => {
                    out.push(b'\\');
                    i += 2;
                }
                Some(b'x') if i + 4 <= bytes.len() => {
                    let hex = std::str::from_utf8(&bytes[i + 2..i + 4]).map_err(|e| e.to_string())?;
                    out.push(u8::from_str_radix(hex, 16).map_err(|e| e.to_string())?);
                    i += 4;
                }
                _ => return Err(format!("bad escape in piece '{s}'")),
            }
        } else {
            out.push(bytes[i]);
            i += 1;
        }
    }
    if out.is_empty() {
        return Err("empty piece".into());
    }
    Ok(out)
}
