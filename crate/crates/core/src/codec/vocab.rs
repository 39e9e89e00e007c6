//! Word-level tokenizer with reserved special tokens.
//!
//! Text is split into pieces: a word (alphanumeric run) or a single
//! punctuation character, optionally carrying one leading space. Any other
//! whitespace run becomes its own piece, so decoding is lossless.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::CodecError;

pub const IMAGE_LITERAL: &str = "⟨IMAGE⟩";
pub const EDIT_LITERAL: &str = "⟨EDIT⟩";
/// Marker emitted by `decode` for the unknown id.
pub const UNKNOWN_MARKER: &str = "⟨UNK⟩";

/// Literals that may never appear inside hints or suggestions.
pub const RESERVED_LITERALS: [&str; 3] = [IMAGE_LITERAL, EDIT_LITERAL, UNKNOWN_MARKER];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SpecialToken {
    Pad,
    Unknown,
    Begin,
    End,
    Image,
    Edit,
}

impl SpecialToken {
    pub const ALL: [SpecialToken; 6] = [
        SpecialToken::Pad,
        SpecialToken::Unknown,
        SpecialToken::Begin,
        SpecialToken::End,
        SpecialToken::Image,
        SpecialToken::Edit,
    ];

    pub fn id(self) -> u32 {
        self as u32
    }

    /// Text stored on the token's reserved line of the vocabulary file.
    pub fn literal(self) -> &'static str {
        match self {
            SpecialToken::Pad => "⟨PAD⟩",
            SpecialToken::Unknown => UNKNOWN_MARKER,
            SpecialToken::Begin => "⟨BOS⟩",
            SpecialToken::End => "⟨EOS⟩",
            SpecialToken::Image => IMAGE_LITERAL,
            SpecialToken::Edit => EDIT_LITERAL,
        }
    }
}

pub const N_RESERVED: usize = SpecialToken::ALL.len();

/// Splits text into pieces. Special literals are kept whole.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let bytes_len = text.len();
    let mut i = 0;
    while i < bytes_len {
        let rest = &text[i..];
        if let Some(lit) = [IMAGE_LITERAL, EDIT_LITERAL]
            .iter()
            .find(|l| rest.starts_with(**l))
        {
            out.push(&text[i..i + lit.len()]);
            i += lit.len();
            continue;
        }
        let mut chars = rest.char_indices();
        let (_, c) = chars.next().expect("non-empty");
        if c.is_whitespace() {
            let ws_end = rest
                .char_indices()
                .find(|(_, ch)| !ch.is_whitespace())
                .map(|(j, _)| j)
                .unwrap_or(rest.len());
            let after = &rest[ws_end..];
            let joinable = &rest[..ws_end] == " "
                && !after.is_empty()
                && ![IMAGE_LITERAL, EDIT_LITERAL]
                    .iter()
                    .any(|l| after.starts_with(l));
            if joinable {
                let body = body_len(after);
                out.push(&text[i..i + 1 + body]);
                i += 1 + body;
            } else {
                out.push(&text[i..i + ws_end]);
                i += ws_end;
            }
            continue;
        }
        let body = body_len(rest);
        out.push(&text[i..i + body]);
        i += body;
    }
    out
}

/// Byte length of the word or punctuation piece at the start of `s`.
fn body_len(s: &str) -> usize {
    let first = s.chars().next().expect("non-empty");
    if first.is_alphanumeric() {
        s.char_indices()
            .find(|(_, c)| !c.is_alphanumeric())
            .map(|(j, _)| j)
            .unwrap_or(s.len())
    } else {
        first.len_utf8()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from a corpus. Pieces are ordered by descending
    /// frequency, ties broken by byte order, so construction is deterministic.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(corpus: I) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in corpus {
            for piece in pretokenize(text) {
                if [IMAGE_LITERAL, EDIT_LITERAL].contains(&piece) {
                    continue;
                }
                *counts.entry(piece).or_default() += 1;
            }
        }
        let mut ordered: Vec<(&str, usize)> = counts.into_iter().collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let pieces = SpecialToken::ALL
            .iter()
            .map(|t| t.literal().to_string())
            .chain(ordered.into_iter().map(|(p, _)| p.to_string()))
            .collect();
        Self::from_pieces(pieces).expect("built vocabulary is well-formed")
    }

    pub fn from_pieces(pieces: Vec<String>) -> Result<Self, CodecError> {
        for (i, tok) in SpecialToken::ALL.iter().enumerate() {
            if pieces.get(i).map(String::as_str) != Some(tok.literal()) {
                return Err(CodecError::Vocabulary(format!(
                    "line {} must be the reserved token {}",
                    i + 1,
                    tok.literal()
                )));
            }
        }
        let mut index = HashMap::with_capacity(pieces.len());
        for (i, p) in pieces.iter().enumerate() {
            if p.is_empty() {
                return Err(CodecError::Vocabulary(format!("line {} is empty", i + 1)));
            }
            if index.insert(p.clone(), i as u32).is_some() {
                return Err(CodecError::Vocabulary(format!("duplicate piece {p:?}")));
            }
        }
        Ok(Self { pieces, index })
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        pretokenize(text)
            .into_iter()
            .map(|p| match p {
                IMAGE_LITERAL => SpecialToken::Image.id(),
                EDIT_LITERAL => SpecialToken::Edit.id(),
                _ => self.id(p).unwrap_or(SpecialToken::Unknown.id()),
            })
            .collect()
    }

    /// Inverse of `encode`. Begin/end/pad ids produce no text; the unknown id
    /// is rendered as a visible marker.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            match id {
                x if x == SpecialToken::Pad.id()
                    || x == SpecialToken::Begin.id()
                    || x == SpecialToken::End.id() => {}
                x => out.push_str(self.piece(x).unwrap_or(UNKNOWN_MARKER)),
            }
        }
        out
    }

    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for p in &self.pieces {
            writeln!(w, "{}", escape(p))?;
        }
        w.flush()
    }

    pub fn read<R: BufRead>(r: R) -> Result<Self, CodecError> {
        let pieces = r
            .lines()
            .map(|l| {
                l.map_err(|e| CodecError::Vocabulary(e.to_string()))
                    .and_then(|l| unescape(&l))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_pieces(pieces)
    }
}

fn escape(piece: &str) -> String {
    let mut s = String::with_capacity(piece.len());
    for c in piece.chars() {
        match c {
            '\\' => s.push_str("\\\\"),
            '\n' => s.push_str("\\n"),
            '\r' => s.push_str("\\r"),
            '\t' => s.push_str("\\t"),
            c => s.push(c),
        }
    }
    s
}

fn unescape(line: &str) -> Result<String, CodecError> {
    let mut s = String::with_capacity(line.len());
    let mut chars = line.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            s.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => s.push('\\'),
            Some('n') => s.push('\n'),
            Some('r') => s.push('\r'),
            Some('t') => s.push('\t'),
            other => {
                return Err(CodecError::Vocabulary(format!(
                    "bad escape \\{} in {line:?}",
                    other.map(String::from).unwrap_or_default()
                )))
            }
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pretokenize_attaches_single_spaces() {
        assert_eq!(
            pretokenize("add a gold necklace."),
            vec!["add", " a", " gold", " necklace", "."]
        );
        assert_eq!(
            pretokenize("HUMAN: ⟨IMAGE⟩ Given"),
            vec!["HUMAN", ":", " ", "⟨IMAGE⟩", " Given"]
        );
        assert_eq!(pretokenize("a  b\n"), vec!["a", "  ", "b", "\n"]);
        assert_eq!(pretokenize("pendant.⟨EDIT⟩"), vec!["pendant", ".", "⟨EDIT⟩"]);
    }

    #[test]
    fn encode_decode_examples() {
        let v = Vocabulary::build(["add a gold necklace", "add a hat"]);
        let ids = v.encode("add a gold necklace");
        assert!(ids.iter().all(|&i| i as usize >= N_RESERVED));
        assert_eq!(v.decode(&ids), "add a gold necklace");

        let ids = v.encode("add a hat.⟨EDIT⟩");
        assert_eq!(*ids.last().unwrap(), SpecialToken::Edit.id());
        assert_eq!(ids.iter().filter(|&&i| i == SpecialToken::Edit.id()).count(), 1);

        let ids = v.encode("add a zebra");
        assert_eq!(ids[2], SpecialToken::Unknown.id());
        assert_eq!(v.decode(&ids), "add a⟨UNK⟩");
    }

    #[test]
    fn build_is_frequency_ordered_and_deterministic() {
        let v = Vocabulary::build(["b a a", "c a"]);
        assert_eq!(v.piece(N_RESERVED as u32), Some(" a"));
        assert_eq!(v, Vocabulary::build(["b a a", "c a"]));
        assert_eq!(v.id("⟨EDIT⟩"), Some(SpecialToken::Edit.id()));
    }

    #[test]
    fn file_round_trip_and_errors() {
        let v = Vocabulary::build(["line one\nline\\two", "tab\there"]);
        let mut buf = Vec::new();
        v.write(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("⟨PAD⟩\n⟨UNK⟩\n⟨BOS⟩\n⟨EOS⟩\n⟨IMAGE⟩\n⟨EDIT⟩\n"));
        assert_eq!(Vocabulary::read(buf.as_slice()).unwrap(), v);

        assert!(Vocabulary::read("a\nb\n".as_bytes()).is_err());
        let dup = format!("{}\nx\nx\n", SpecialToken::ALL.map(|t| t.literal()).join("\n"));
        assert!(Vocabulary::read(dup.as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_in_vocabulary_text(words in prop::collection::vec("[a-z]{1,6}|[,:;!?]", 1..12),
                                         seps in prop::collection::vec(prop::sample::select(vec!["", " ", "  ", "\n"]), 12)) {
            let mut text = String::new();
            for (w, s) in words.iter().zip(&seps) {
                text.push_str(s);
                text.push_str(w);
            }
            let v = Vocabulary::build([text.as_str()]);
            let ids = v.encode(&text);
            prop_assert!(!ids.contains(&SpecialToken::Unknown.id()));
            prop_assert_eq!(v.decode(&ids), text);
        }
    }
}
