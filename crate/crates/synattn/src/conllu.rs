//! CoNLL-U ingestion and wordpiece alignment.
//!
//! Sentences arrive pre-parsed (10-column CoNLL-U). We keep only the
//! columns the model consumes: FORM, UPOS, HEAD, DEPREL.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

/// Continuation marker for non-initial wordpieces.
pub const CONT_MARKER: &str = "##";

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";

#[derive(Debug, Error)]
pub enum ConlluError {
    #[error("sentence {sentence}, line {line}: expected 10 tab-separated columns, got {got}")]
    MalformedLine {
        sentence: String,
        line: usize,
        got: usize,
    },
    #[error("sentence {sentence}, line {line}: HEAD column is not an integer: {value:?}")]
    NonIntegerHead {
        sentence: String,
        line: usize,
        value: String,
    },
    #[error("sentence {sentence}, line {line}: head index {head} out of range for {n} tokens")]
    HeadOutOfRange {
        sentence: String,
        line: usize,
        head: usize,
        n: usize,
    },
    #[error("sentence {sentence}: head relation contains a cycle (first line {line})")]
    CycleDetected { sentence: String, line: usize },
    #[error("sentence {sentence}: more than one token has HEAD=0 (line {line})")]
    MultipleRoots { sentence: String, line: usize },
    #[error("sentence {sentence}: no token has HEAD=0")]
    NoRoot { sentence: String },
    #[error("sentence {sentence}: block contains no token lines")]
    EmptySentence { sentence: String },
    #[error("sentence {sentence}, line {line}: unknown UPOS tag {tag:?}")]
    UnknownUpos {
        sentence: String,
        line: usize,
        tag: String,
    },
    #[error("cannot tokenize an empty word")]
    EmptyWord,
}

/// The 17 universal POS tags, plus one id reserved for special symbols
/// ([CLS]/[SEP]/padding) so GAT inputs always have a tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UposTag {
    Adj,
    Adp,
    Adv,
    Aux,
    Cconj,
    Det,
    Intj,
    Noun,
    Num,
    Part,
    Pron,
    Propn,
    Punct,
    Sconj,
    Sym,
    Verb,
    X,
    Special,
}

pub const N_UPOS_IDS: usize = 18;

const UPOS_NAMES: [(&str, UposTag); 17] = [
    ("ADJ", UposTag::Adj),
    ("ADP", UposTag::Adp),
    ("ADV", UposTag::Adv),
    ("AUX", UposTag::Aux),
    ("CCONJ", UposTag::Cconj),
    ("DET", UposTag::Det),
    ("INTJ", UposTag::Intj),
    ("NOUN", UposTag::Noun),
    ("NUM", UposTag::Num),
    ("PART", UposTag::Part),
    ("PRON", UposTag::Pron),
    ("PROPN", UposTag::Propn),
    ("PUNCT", UposTag::Punct),
    ("SCONJ", UposTag::Sconj),
    ("SYM", UposTag::Sym),
    ("VERB", UposTag::Verb),
    ("X", UposTag::X),
];

impl UposTag {
    pub fn from_str(s: &str) -> Option<UposTag> {
        UPOS_NAMES.iter().find(|(n, _)| *n == s).map(|(_, t)| *t)
    }

    pub fn id(self) -> usize {
        match self {
            UposTag::Adj => 0,
            UposTag::Adp => 1,
            UposTag::Adv => 2,
            UposTag::Aux => 3,
            UposTag::Cconj => 4,
            UposTag::Det => 5,
            UposTag::Intj => 6,
            UposTag::Noun => 7,
            UposTag::Num => 8,
            UposTag::Part => 9,
            UposTag::Pron => 10,
            UposTag::Propn => 11,
            UposTag::Punct => 12,
            UposTag::Sconj => 13,
            UposTag::Sym => 14,
            UposTag::Verb => 15,
            UposTag::X => 16,
            UposTag::Special => 17,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            UposTag::Special => "_SPECIAL_",
            other => {
                UPOS_NAMES
                    .iter()
                    .find(|(_, t)| *t == other)
                    .expect("tag in table")
                    .0
            }
        }
    }
}

/// One dependency-parsed sentence. `heads[i]` is the 0-based index of
/// token i's head, `None` for the root.
#[derive(Debug, Clone, PartialEq)]
pub struct ParsedSentence {
    pub words: Vec<String>,
    pub upos: Vec<UposTag>,
    pub heads: Vec<Option<usize>>,
    pub deprels: Vec<String>,
    pub sentence_id: String,
    /// `# key = value` comment lines, in file order.
    pub meta: Vec<(String, String)>,
}

impl ParsedSentence {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn root(&self) -> usize {
        self.heads
            .iter()
            .position(|h| h.is_none())
            .expect("validated sentence has a root")
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// Serialize back to a CoNLL-U block (FORM/UPOS/HEAD/DEPREL populated,
    /// remaining columns `_`).
    pub fn to_conllu(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.meta {
            writeln!(out, "# {} = {}", k, v).unwrap();
        }
        for i in 0..self.len() {
            let head = match self.heads[i] {
                None => 0,
                Some(h) => h + 1,
            };
            writeln!(
                out,
                "{}\t{}\t_\t{}\t_\t_\t{}\t{}\t_\t_",
                i + 1,
                self.words[i],
                self.upos[i].name(),
                head,
                self.deprels[i]
            )
            .unwrap();
        }
        out
    }
}

/// Parse a CoNLL-U document into sentences. Multiword-token ranges
/// (`3-4`) and empty nodes (`5.1`) are skipped; `# sent_id = ...`
/// populates `sentence_id`.
pub fn parse_conllu(text: &str) -> Result<Vec<ParsedSentence>, ConlluError> {
    let mut sentences = Vec::new();
    let mut block: Vec<(usize, &str)> = Vec::new();
    let mut line_no = 0usize;
    for line in text.lines() {
        line_no += 1;
        if line.trim().is_empty() {
            if !block.is_empty() {
                sentences.push(parse_block(&block, sentences.len())?);
                block.clear();
            }
        } else {
            block.push((line_no, line));
        }
    }
    if !block.is_empty() {
        sentences.push(parse_block(&block, sentences.len())?);
    }
    Ok(sentences)
}

fn parse_block(
    lines: &[(usize, &str)],
    index: usize,
) -> Result<ParsedSentence, ConlluError> {
    let mut sentence_id = format!("s{}", index);
    let mut meta = Vec::new();
    let mut words = Vec::new();
    let mut upos = Vec::new();
    let mut heads_raw: Vec<(usize, usize)> = Vec::new(); // (line, 1-based head)
    let mut deprels = Vec::new();

    for &(line_no, line) in lines {
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((k, v)) = comment.split_once('=') {
                let k = k.trim().to_string();
                let v = v.trim().to_string();
                if k == "sent_id" {
                    sentence_id = v.clone();
                }
                meta.push((k, v));
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(ConlluError::MalformedLine {
                sentence: sentence_id.clone(),
                line: line_no,
                got: cols.len(),
            });
        }
        // Skip multiword ranges (1-2) and empty nodes (1.1).
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        let head: usize = cols[6].parse().map_err(|_| ConlluError::NonIntegerHead {
            sentence: sentence_id.clone(),
            line: line_no,
            value: cols[6].to_string(),
        })?;
        let tag = UposTag::from_str(cols[3]).ok_or_else(|| ConlluError::UnknownUpos {
            sentence: sentence_id.clone(),
            line: line_no,
            tag: cols[3].to_string(),
        })?;
        words.push(cols[1].to_string());
        upos.push(tag);
        heads_raw.push((line_no, head));
        deprels.push(cols[7].to_string());
    }

    if words.is_empty() {
        return Err(ConlluError::EmptySentence {
            sentence: sentence_id,
        });
    }

    let n = words.len();
    let mut heads = Vec::with_capacity(n);
    let mut root_line: Option<usize> = None;
    for &(line_no, head) in &heads_raw {
        if head == 0 {
            if root_line.is_some() {
                return Err(ConlluError::MultipleRoots {
                    sentence: sentence_id,
                    line: line_no,
                });
            }
            root_line = Some(line_no);
            heads.push(None);
        } else {
            if head > n {
                return Err(ConlluError::HeadOutOfRange {
                    sentence: sentence_id,
                    line: line_no,
                    head,
                    n,
                });
            }
            heads.push(Some(head - 1));
        }
    }
    if root_line.is_none() {
        return Err(ConlluError::NoRoot {
            sentence: sentence_id,
        });
    }

    // Cycle check: walk to the root from every node.
    for start in 0..n {
        let mut seen = 0usize;
        let mut cur = start;
        while let Some(h) = heads[cur] {
            cur = h;
            seen += 1;
            if seen > n {
                return Err(ConlluError::CycleDetected {
                    sentence: sentence_id,
                    line: heads_raw[start].0,
                });
            }
        }
    }

    Ok(ParsedSentence {
        words,
        upos,
        heads,
        deprels,
        sentence_id,
        meta,
    })
}

/// Subword vocabulary: one piece per line in file form, line index = id.
#[derive(Debug, Clone)]
pub struct Vocab {
    pieces: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(pieces: Vec<String>) -> Vocab {
        let index = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        Vocab { pieces, index }
    }

    pub fn from_lines(text: &str) -> Vocab {
        Vocab::new(text.lines().map(|l| l.to_string()).collect())
    }

    /// Build a vocabulary covering a corpus: special tokens, whole words,
    /// and all single characters (initial and continuation forms).
    pub fn from_corpus<'a>(words: impl Iterator<Item = &'a str>) -> Vocab {
        let mut pieces = vec![
            PAD_TOKEN.to_string(),
            UNK_TOKEN.to_string(),
            CLS_TOKEN.to_string(),
            SEP_TOKEN.to_string(),
        ];
        let mut seen: HashMap<String, ()> =
            pieces.iter().map(|p| (p.clone(), ())).collect();
        let mut push = |pieces: &mut Vec<String>, s: String| {
            if !seen.contains_key(&s) {
                seen.insert(s.clone(), ());
                pieces.push(s);
            }
        };
        let mut chars: Vec<char> = Vec::new();
        for w in words {
            push(&mut pieces, w.to_string());
            for c in w.chars() {
                if !chars.contains(&c) {
                    chars.push(c);
                }
            }
        }
        for c in chars {
            push(&mut pieces, c.to_string());
            push(&mut pieces, format!("{}{}", CONT_MARKER, c));
        }
        Vocab::new(pieces)
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn id(&self, piece: &str) -> Option<usize> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: usize) -> &str {
        &self.pieces[id]
    }

    pub fn pad_id(&self) -> usize {
        self.id(PAD_TOKEN).unwrap_or(0)
    }

    pub fn unk_id(&self) -> usize {
        self.id(UNK_TOKEN).unwrap_or(0)
    }

    pub fn cls_id(&self) -> usize {
        self.id(CLS_TOKEN).unwrap_or(0)
    }

    pub fn sep_id(&self) -> usize {
        self.id(SEP_TOKEN).unwrap_or(0)
    }

    pub fn to_lines(&self) -> String {
        let mut s = self.pieces.join("\n");
        s.push('\n');
        s
    }
}

/// Wordpiece segmentation of a sentence, with the word-to-piece map the
/// tree surgery needs.
#[derive(Debug, Clone, PartialEq)]
pub struct WordpieceAlignment {
    pub pieces: Vec<String>,
    /// Per original word, `(start, end)` piece index range (half-open).
    pub word_spans: Vec<(usize, usize)>,
    /// True for the first piece of each word.
    pub piece_is_head: Vec<bool>,
}

impl WordpieceAlignment {
    pub fn n_pieces(&self) -> usize {
        self.pieces.len()
    }

    /// Word index of each piece.
    pub fn piece_word(&self) -> Vec<usize> {
        let mut out = vec![0usize; self.pieces.len()];
        for (w, &(s, e)) in self.word_spans.iter().enumerate() {
            for item in out.iter_mut().take(e).skip(s) {
                *item = w;
            }
        }
        out
    }
}

/// Greedy longest-match-first wordpiece segmentation. A word with no
/// valid segmentation becomes a single `[UNK]` piece.
pub fn wordpiece_tokenize(
    words: &[String],
    vocab: &Vocab,
) -> Result<WordpieceAlignment, ConlluError> {
    let mut pieces = Vec::new();
    let mut word_spans = Vec::new();
    let mut piece_is_head = Vec::new();
    for word in words {
        if word.is_empty() {
            return Err(ConlluError::EmptyWord);
        }
        let start = pieces.len();
        let word_pieces = segment_word(word, vocab);
        for (i, p) in word_pieces.iter().enumerate() {
            pieces.push(p.clone());
            piece_is_head.push(i == 0);
        }
        word_spans.push((start, pieces.len()));
    }
    Ok(WordpieceAlignment {
        pieces,
        word_spans,
        piece_is_head,
    })
}

fn segment_word(word: &str, vocab: &Vocab) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let mut out = Vec::new();
    let mut pos = 0usize;
    while pos < chars.len() {
        let mut found: Option<String> = None;
        for end in (pos + 1..=chars.len()).rev() {
            let raw: String = chars[pos..end].iter().collect();
            let candidate = if pos == 0 {
                raw
            } else {
                format!("{}{}", CONT_MARKER, raw)
            };
            if vocab.id(&candidate).is_some() {
                found = Some(candidate);
                pos = end;
                break;
            }
        }
        match found {
            Some(p) => out.push(p),
            None => return vec![UNK_TOKEN.to_string()],
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_token_doc() -> &'static str {
        "1\tdogs\t_\tNOUN\t_\t_\t2\tnsubj\t_\t_\n\
         2\tbark\t_\tVERB\t_\t_\t0\troot\t_\t_\n"
    }

    #[test]
    fn parses_two_token_block() {
        let sents = parse_conllu(two_token_doc()).unwrap();
        assert_eq!(sents.len(), 1);
        let s = &sents[0];
        assert_eq!(s.words, vec!["dogs", "bark"]);
        assert_eq!(s.heads, vec![Some(1), None]);
        assert_eq!(s.upos, vec![UposTag::Noun, UposTag::Verb]);
        assert_eq!(s.root(), 1);
    }

    #[test]
    fn captures_sent_id_and_meta() {
        let doc = format!("# sent_id = train-42\n# label = 1\n{}", two_token_doc());
        let s = &parse_conllu(&doc).unwrap()[0];
        assert_eq!(s.sentence_id, "train-42");
        assert_eq!(s.meta_value("label"), Some("1"));
    }

    #[test]
    fn multiple_roots_rejected() {
        let doc = "1\ta\t_\tNOUN\t_\t_\t0\troot\t_\t_\n\
                   2\tb\t_\tVERB\t_\t_\t0\troot\t_\t_\n";
        match parse_conllu(doc) {
            Err(ConlluError::MultipleRoots { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected MultipleRoots, got {:?}", other),
        }
    }

    #[test]
    fn cycle_rejected() {
        let doc = "1\ta\t_\tNOUN\t_\t_\t2\tdep\t_\t_\n\
                   2\tb\t_\tVERB\t_\t_\t1\tdep\t_\t_\n\
                   3\tc\t_\tVERB\t_\t_\t0\troot\t_\t_\n";
        assert!(matches!(
            parse_conllu(doc),
            Err(ConlluError::CycleDetected { .. })
        ));
    }

    #[test]
    fn malformed_line_reports_position() {
        let doc = "1\tonly\tthree\n";
        match parse_conllu(doc) {
            Err(ConlluError::MalformedLine { line, got, .. }) => {
                assert_eq!(line, 1);
                assert_eq!(got, 3);
            }
            other => panic!("unexpected {:?}", other),
        }
    }

    #[test]
    fn comment_only_block_is_empty_sentence() {
        let doc = "# sent_id = x\n";
        assert!(matches!(
            parse_conllu(doc),
            Err(ConlluError::EmptySentence { .. })
        ));
    }

    #[test]
    fn skips_ranges_and_empty_nodes() {
        let doc = "1-2\tdel\t_\t_\t_\t_\t_\t_\t_\t_\n\
                   1\tdogs\t_\tNOUN\t_\t_\t2\tnsubj\t_\t_\n\
                   2\tbark\t_\tVERB\t_\t_\t0\troot\t_\t_\n\
                   2.1\tghost\t_\tVERB\t_\t_\t_\t_\t_\t_\n";
        let s = &parse_conllu(doc).unwrap()[0];
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn round_trip() {
        let doc = format!("# sent_id = rt\n{}", two_token_doc());
        let s = &parse_conllu(&doc).unwrap()[0];
        let again = &parse_conllu(&s.to_conllu()).unwrap()[0];
        assert_eq!(s, again);
    }

    #[test]
    fn tokenize_whole_word() {
        let vocab = Vocab::new(vec!["play".into()]);
        let a = wordpiece_tokenize(&["play".to_string()], &vocab).unwrap();
        assert_eq!(a.pieces, vec!["play"]);
        assert_eq!(a.word_spans, vec![(0, 1)]);
        assert_eq!(a.piece_is_head, vec![true]);
    }

    #[test]
    fn tokenize_greedy_split() {
        let vocab = Vocab::new(vec!["play".into(), "##ing".into()]);
        let a = wordpiece_tokenize(&["playing".to_string()], &vocab).unwrap();
        assert_eq!(a.pieces, vec!["play", "##ing"]);
        assert_eq!(a.word_spans, vec![(0, 2)]);
        assert_eq!(a.piece_is_head, vec![true, false]);
    }

    #[test]
    fn tokenize_single_chars() {
        // Fixture vocab holds only single characters; greedy matching
        // decomposes "qz" into q, ##z.
        let vocab = Vocab::new(vec!["q".into(), "z".into(), "##q".into(), "##z".into()]);
        let a = wordpiece_tokenize(&["qz".to_string()], &vocab).unwrap();
        assert_eq!(a.pieces, vec!["q", "##z"]);
    }

    #[test]
    fn tokenize_unknown_word() {
        let vocab = Vocab::new(vec![UNK_TOKEN.into(), "a".into()]);
        let a = wordpiece_tokenize(&["zzz".to_string()], &vocab).unwrap();
        assert_eq!(a.pieces, vec![UNK_TOKEN]);
        assert_eq!(a.word_spans, vec![(0, 1)]);
    }

    #[test]
    fn tokenize_empty_word_errors() {
        let vocab = Vocab::new(vec![]);
        assert!(matches!(
            wordpiece_tokenize(&[String::new()], &vocab),
            Err(ConlluError::EmptyWord)
        ));
    }

    #[test]
    fn corpus_vocab_covers_words_and_chars() {
        let vocab = Vocab::from_corpus(["dogs", "bark"].into_iter());
        assert!(vocab.id("dogs").is_some());
        assert!(vocab.id("##s").is_some());
        assert_eq!(vocab.id(PAD_TOKEN), Some(0));
    }
}
