//! Word-level tokenization, vocabularies, sentence splitting and labeled
//! JSON-lines datasets.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const BOS: usize = 4;
pub const EOS: usize = 5;
pub const FIELD_SEP: usize = 6;
pub const NUM_RESERVED: usize = 7;

pub const RESERVED_TOKENS: [&str; NUM_RESERVED] =
    ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[BOS]", "[EOS]", "[FSEP]"];

pub const DEFAULT_MAX_LEN: usize = 128;

const PUNCTUATION: [char; 6] = ['.', ',', '!', '?', ';', ':'];
const TERMINATORS: [char; 3] = ['.', '!', '?'];

/// Ids that are structural markers rather than text. `FIELD_SEP` and `UNK`
/// are deliberately not in this set: both render as text.
pub fn is_marker(id: usize) -> bool {
    matches!(id, PAD | CLS | SEP | BOS | EOS)
}

/// Byte spans of word tokens: whitespace separates words and each of
/// `.,!?;:` is a token of its own.
pub fn word_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() || PUNCTUATION.contains(&c) {
            if let Some(s) = start.take() {
                spans.push(s..i);
            }
            if !c.is_whitespace() {
                spans.push(i..i + c.len_utf8());
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        spans.push(s..text.len());
    }
    spans
}

pub fn words(text: &str) -> Vec<&str> {
    word_spans(text).into_iter().map(|r| &text[r]).collect()
}

/// Word tokens joined by single spaces: the canonical form that
/// `detokenize ∘ tokenize` reproduces.
pub fn normalize(text: &str) -> String {
    words(text).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Default for Vocab {
    fn default() -> Self {
        Self::reserved_only()
    }
}

impl Vocab {
    pub fn reserved_only() -> Self {
        let id_to_token: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let token_to_id = id_to_token.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Self { token_to_id, id_to_token }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Appends `token` if absent and returns its id.
    pub fn push(&mut self, token: &str) -> usize {
        if let Some(id) = self.id(token) {
            return id;
        }
        let id = self.id_to_token.len();
        self.id_to_token.push(token.to_string());
        self.token_to_id.insert(token.to_string(), id);
        id
    }

    /// Id for a word of input text. Literal marker strings never map to
    /// their marker ids, so a sequence can only gain markers structurally.
    pub fn lookup_word(&self, word: &str) -> usize {
        match self.id(word) {
            Some(id) if id == FIELD_SEP || id >= NUM_RESERVED => id,
            _ => UNK,
        }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < NUM_RESERVED
            || tokens.iter().zip(RESERVED_TOKENS).any(|(t, r)| t != r)
        {
            return Err(invalid("vocabulary must start with the reserved tokens"));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i).is_some() {
                return Err(invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { token_to_id, id_to_token: tokens })
    }

    /// One token per line; line number − 1 is the id.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        for t in &self.id_to_token {
            writeln!(w, "{t}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let tokens = reader.lines().collect::<std::io::Result<Vec<_>>>()?;
        Self::from_tokens(tokens)
    }
}

/// Reserved tokens first, then corpus words by descending frequency with
/// lexicographic tie-breaking, up to `max_size` entries in total.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if max_size < NUM_RESERVED {
        return Err(invalid(format!(
            "max_size {max_size} leaves no room for {NUM_RESERVED} reserved tokens"
        )));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for text in corpus {
        for w in words(text.as_ref()) {
            if !RESERVED_TOKENS.contains(&w) {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut vocab = Vocab::reserved_only();
    for (w, _) in ranked.into_iter().take(max_size - NUM_RESERVED) {
        vocab.push(w);
    }
    Ok(vocab)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizeMode {
    /// `CLS content SEP`.
    Classifier,
    /// Content ids only.
    Lm,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSequence {
    pub ids: Vec<usize>,
    /// Index range of the non-marker tokens within `ids`.
    pub content: Range<usize>,
    /// Byte span in the source text per token; `None` for markers.
    pub offsets: Vec<Option<Range<usize>>>,
}

impl TokenizedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn content_ids(&self) -> &[usize] {
        &self.ids[self.content.clone()]
    }

    pub fn content_len(&self) -> usize {
        self.content.len()
    }

    /// Wraps `content` ids in `CLS … SEP`, carrying over provenance.
    pub fn classifier(content: Vec<usize>, offsets: Vec<Option<Range<usize>>>) -> Self {
        debug_assert_eq!(content.len(), offsets.len());
        let m = content.len();
        let mut ids = Vec::with_capacity(m + 2);
        ids.push(CLS);
        ids.extend(content);
        ids.push(SEP);
        let mut offs = Vec::with_capacity(m + 2);
        offs.push(None);
        offs.extend(offsets);
        offs.push(None);
        Self { ids, content: 1..1 + m, offsets: offs }
    }

    /// Content rendered from the source text the sequence was tokenized from,
    /// so out-of-vocabulary words survive. Falls back to the vocabulary for
    /// tokens without provenance.
    pub fn render(&self, source: &str, vocab: &Vocab) -> String {
        self.content
            .clone()
            .filter_map(|i| match &self.offsets[i] {
                Some(r) => source.get(r.clone()).map(str::to_string),
                None => vocab.token(self.ids[i]).map(str::to_string),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize, mode: TokenizeMode) -> Result<TokenizedSequence> {
    let spans = word_spans(text);
    match mode {
        TokenizeMode::Classifier => {
            if max_len < 3 {
                return Err(invalid("classifier mode needs max_len >= 3"));
            }
            let keep = spans.len().min(max_len - 2);
            let ids = spans[..keep].iter().map(|r| vocab.lookup_word(&text[r.clone()])).collect();
            let offsets = spans[..keep].iter().cloned().map(Some).collect();
            Ok(TokenizedSequence::classifier(ids, offsets))
        }
        TokenizeMode::Lm => {
            let keep = spans.len().min(max_len);
            let ids: Vec<usize> = spans[..keep].iter().map(|r| vocab.lookup_word(&text[r.clone()])).collect();
            let n = ids.len();
            Ok(TokenizedSequence {
                ids,
                content: 0..n,
                offsets: spans[..keep].iter().cloned().map(Some).collect(),
            })
        }
    }
}

/// Drops markers and joins the remaining tokens with single spaces.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> Result<String> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let tok = vocab.token(id).ok_or(Error::UnknownId(id))?;
        if !is_marker(id) {
            out.push(tok);
        }
    }
    Ok(out.join(" "))
}

/// Splits after `.`, `!` or `?` when followed by whitespace or the end of
/// the text. A whitespace-delimited chunk that already contains an inner
/// period (`A.B.`, `e.g.`) is treated as an abbreviation and never ends a
/// sentence on its own.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut sentences = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for chunk in text.split_whitespace() {
        current.push(chunk);
        let ends = chunk.ends_with(TERMINATORS);
        let body = &chunk[..chunk.len() - chunk.chars().last().map_or(0, char::len_utf8)];
        let abbreviation = body.contains('.');
        if ends && !abbreviation {
            sentences.push(current.join(" "));
            current.clear();
        }
    }
    if !current.is_empty() {
        sentences.push(current.join(" "));
    }
    sentences
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text2: Option<String>,
    pub label: usize,
}

impl LabeledRecord {
    pub fn new(text: impl Into<String>, label: usize) -> Self {
        Self { text: text.into(), text2: None, label }
    }

    pub fn pair(text: impl Into<String>, text2: impl Into<String>, label: usize) -> Self {
        Self { text: text.into(), text2: Some(text2.into()), label }
    }

    /// The classifier input: `text`, or `text [FSEP] text2` for pairs.
    pub fn joined_text(&self) -> String {
        match &self.text2 {
            Some(t2) => format!("{} {} {}", self.text, RESERVED_TOKENS[FIELD_SEP], t2),
            None => self.text.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledDataset {
    pub records: Vec<LabeledRecord>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(records: Vec<LabeledRecord>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(invalid("num_classes must be at least 2"));
        }
        if let Some(r) = records.iter().find(|r| r.label >= num_classes) {
            return Err(invalid(format!("label {} outside [0, {num_classes})", r.label)));
        }
        Ok(Self { records, num_classes })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn texts(&self) -> Vec<String> {
        self.records.iter().map(LabeledRecord::joined_text).collect()
    }

    pub fn tokenize(&self, vocab: &Vocab, max_len: usize) -> Result<Vec<TokenizedSequence>> {
        self.records
            .iter()
            .map(|r| tokenize(&r.joined_text(), vocab, max_len, TokenizeMode::Classifier))
            .collect()
    }

    /// Records `[start, end)` as a new dataset with the same class count.
    pub fn slice(&self, range: Range<usize>) -> Self {
        Self { records: self.records[range].to_vec(), num_classes: self.num_classes }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_jsonl(path, &self.records)
    }
}

fn parse_record(line: &str, line_no: usize) -> Result<LabeledRecord> {
    let parse_err = |message: String| Error::Parse { line: line_no, message };
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
    let obj = value.as_object().ok_or_else(|| parse_err("expected a JSON object".into()))?;
    let text = obj
        .get("text")
        .and_then(|v| v.as_str())
        .ok_or_else(|| parse_err("`text` must be a string".into()))?
        .to_string();
    let text2 = match obj.get("text2") {
        None | Some(serde_json::Value::Null) => None,
        Some(v) => Some(
            v.as_str()
                .ok_or_else(|| parse_err("`text2` must be a string".into()))?
                .to_string(),
        ),
    };
    let label = obj
        .get("label")
        .and_then(|v| v.as_i64())
        .ok_or_else(|| parse_err("`label` must be an integer".into()))?;
    if label < 0 {
        return Err(Error::NegativeLabel { line: line_no, label });
    }
    Ok(LabeledRecord { text, text2, label: label as usize })
}

/// Reads a JSON-lines dataset. `num_classes` defaults to `1 + max label`
/// (at least 2); an override smaller than that is rejected.
pub fn load_dataset(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<LabeledDataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_record(&line, i + 1)?);
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let inferred = records.iter().map(|r| r.label).max().unwrap_or(0) + 1;
    let num_classes = match num_classes {
        Some(n) if n < inferred => {
            return Err(invalid(format!("num_classes {n} is smaller than 1 + max label ({inferred})")))
        }
        Some(n) => n,
        None => inferred.max(2),
    };
    LabeledDataset::new(records, num_classes)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?);
    }
    Ok(rows)
}
