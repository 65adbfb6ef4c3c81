//! Vocabulary, tokenizer, prompt embedding and the rule-based re-captioner.

use std::collections::BTreeMap;

use candle_core::{Device, Tensor};

use crate::corpus::{Color, Direction, Shape};
use crate::error::{invalid, Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const SUBJECT: &str = "<V>";
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const SUBJECT_ID: u32 = 2;
/// Fixed prompt length in tokens.
pub const MAX_TOKENS: usize = 8;
/// Generic noun used in subject prompts ("a <V> sprite").
pub const SUBJECT_NOUN: &str = "sprite";

const SYNONYMS_TSV: &str = include_str!("../data/synonyms.tsv");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
    subject_active: bool,
}

impl Vocab {
    /// Grammar vocabulary with the subject slot reserved but inactive.
    pub fn grammar() -> Self {
        let mut words: Vec<String> = vec![PAD.into(), UNK.into(), SUBJECT.into(), "a".into()];
        words.extend(Color::ALL.iter().map(|c| c.name().to_string()));
        words.extend(Shape::ALL.iter().map(|s| s.name().to_string()));
        words.push("moves".into());
        words.extend(Direction::ALL.iter().map(|d| d.name().to_string()));
        words.push(SUBJECT_NOUN.into());
        Self::from_words(words, false).expect("grammar vocabulary is well formed")
    }

    fn from_words(words: Vec<String>, subject_active: bool) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                return invalid(format!("duplicate vocabulary word {w}"));
            }
        }
        if words.first().map(String::as_str) != Some(PAD)
            || words.get(UNK_ID as usize).map(String::as_str) != Some(UNK)
            || words.get(SUBJECT_ID as usize).map(String::as_str) != Some(SUBJECT)
        {
            return invalid("vocabulary must start with <pad>, <unk>, <V>");
        }
        Ok(Self { words, index, subject_active })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn subject_active(&self) -> bool {
        self.subject_active
    }

    /// Id of a word as the tokenizer sees it; the inactive subject slot is unknown.
    pub fn id(&self, word: &str) -> Option<u32> {
        if word == SUBJECT && !self.subject_active {
            return None;
        }
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// `word<TAB>id` per line; a `# subject active` comment records activation.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        if self.subject_active {
            out.push_str("# subject active\n");
        }
        for (i, w) in self.words.iter().enumerate() {
            out.push_str(&format!("{w}\t{i}\n"));
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut words: Vec<(u32, String)> = vec![];
        let mut active = false;
        for line in text.lines() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                active |= comment.trim() == "subject active";
                continue;
            }
            let (w, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("bad vocabulary line {line:?}")))?;
            let id: u32 = id.parse().map_err(|_| Error::Format(format!("bad id in {line:?}")))?;
            words.push((id, w.to_string()));
        }
        words.sort();
        if words.iter().enumerate().any(|(i, (id, _))| *id as usize != i) {
            return Err(Error::Format("vocabulary ids are not dense".into()));
        }
        Self::from_words(words.into_iter().map(|(_, w)| w).collect(), active)
    }
}

/// Activate the reserved `<V>` slot. Every existing id is unchanged.
pub fn extend_vocab_subject(vocab: &Vocab) -> Result<Vocab> {
    if vocab.subject_active {
        return Err(Error::InvalidState("subject token already active".into()));
    }
    let mut v = vocab.clone();
    v.subject_active = true;
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PromptTokens {
    pub ids: [u32; MAX_TOKENS],
    /// Number of non-pad tokens.
    pub len: usize,
}

impl PromptTokens {
    /// The all-pad sequence, used as the unconditional prompt.
    pub const NULL: PromptTokens = PromptTokens { ids: [PAD_ID; MAX_TOKENS], len: 0 };

    pub fn is_null(&self) -> bool {
        self.len == 0
    }

    /// 1.0 for real tokens, 0.0 for padding.
    pub fn mask(&self) -> [f32; MAX_TOKENS] {
        let mut m = [0.0; MAX_TOKENS];
        for (slot, id) in m.iter_mut().zip(self.ids.iter()) {
            *slot = if *id == PAD_ID { 0.0 } else { 1.0 };
        }
        m
    }
}

fn normalize_word(w: &str) -> String {
    let w = w.to_lowercase();
    if w == "<v>" {
        SUBJECT.to_string()
    } else {
        w
    }
}

pub fn tokenize(vocab: &Vocab, caption: &str) -> Result<PromptTokens> {
    let caption = caption.trim();
    if caption.is_empty() {
        return invalid("empty caption");
    }
    let mut ids = [PAD_ID; MAX_TOKENS];
    let mut len = 0;
    for (slot, word) in ids.iter_mut().zip(caption.split_whitespace()) {
        *slot = vocab.id(&normalize_word(word)).unwrap_or(UNK_ID);
        len += 1;
    }
    Ok(PromptTokens { ids, len })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynonymTable {
    map: BTreeMap<String, String>,
}

impl SynonymTable {
    /// The table shipped with the crate (`data/synonyms.tsv`).
    pub fn builtin() -> Self {
        Self::from_tsv(SYNONYMS_TSV).expect("builtin synonym table parses")
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().map(str::trim_end).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (alias, canonical) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("bad synonym line {line:?}")))?;
            map.insert(alias.to_string(), canonical.to_string());
        }
        Ok(Self { map })
    }

    pub fn to_tsv(&self) -> String {
        self.map.iter().map(|(a, c)| format!("{a}\t{c}\n")).collect()
    }

    pub fn canonical<'a>(&'a self, word: &'a str) -> &'a str {
        self.map.get(word).map(String::as_str).unwrap_or(word)
    }
}

/// Rewrite a free-form prompt into the caption grammar
/// `a {color} {shape} [moves {direction}]`. A `<V>` token takes the colour
/// slot and the shape defaults to the generic noun.
pub fn recaption(user_prompt: &str, synonyms: &SynonymTable) -> Result<String> {
    if user_prompt.trim().is_empty() {
        return invalid("empty prompt");
    }
    let mut color = None;
    let mut shape = None;
    let mut direction = None;
    let mut subject = false;
    for raw in user_prompt.split_whitespace() {
        let word = normalize_word(raw.trim_matches(|c: char| c.is_ascii_punctuation() && c != '<' && c != '>'));
        let word = synonyms.canonical(&word);
        if word == SUBJECT {
            subject = true;
        } else if let Some(c) = Color::from_name(word) {
            color.get_or_insert(c);
        } else if let Some(s) = Shape::from_name(word) {
            shape.get_or_insert(s.name());
        } else if word == SUBJECT_NOUN {
            shape.get_or_insert(SUBJECT_NOUN);
        } else if let Some(d) = Direction::from_name(word) {
            direction.get_or_insert(d);
        }
    }
    let color_word = if subject { Some(SUBJECT) } else { color.map(Color::name) };
    let shape_word = match shape {
        Some(s) if s != SUBJECT_NOUN || subject => Some(s),
        _ if subject => Some(SUBJECT_NOUN),
        _ => None,
    };
    let missing: Vec<&str> = [("color", color_word.is_none()), ("shape", shape_word.is_none())]
        .into_iter()
        .filter_map(|(slot, miss)| miss.then_some(slot))
        .collect();
    if !missing.is_empty() {
        return Err(Error::UnresolvablePrompt {
            prompt: user_prompt.to_string(),
            missing: missing.join(", "),
        });
    }
    let mut out = format!("a {} {}", color_word.unwrap(), shape_word.unwrap());
    if let Some(d) = direction {
        out.push_str(" moves ");
        out.push_str(d.name());
    }
    Ok(out)
}

/// Look up one embedding row per token: `(MAX_TOKENS, d_model)`.
pub fn embed(table: &Tensor, tokens: &PromptTokens) -> Result<Tensor> {
    let (rows, _) = table.dims2()?;
    if let Some(bad) = tokens.ids.iter().find(|&&id| id as usize >= rows) {
        return invalid(format!("token id {bad} outside embedding table of {rows} rows"));
    }
    let ids = Tensor::from_slice(&tokens.ids, MAX_TOKENS, &Device::Cpu)?;
    Ok(table.index_select(&ids, 0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{caption_of, ClipSpec, Motion};
    use crate::nn::to_vec_f64;
    use candle_core::DType;
    use proptest::prelude::*;

    fn id(v: &Vocab, w: &str) -> u32 {
        v.id(w).unwrap()
    }

    #[test]
    fn vocabulary_is_dense_with_pad_zero() {
        let v = Vocab::grammar();
        assert_eq!(v.id(PAD), Some(0));
        for i in 0..v.len() as u32 {
            let w = v.word(i).unwrap();
            if w != SUBJECT {
                assert_eq!(v.id(w), Some(i));
            }
        }
        assert_eq!(Vocab::from_tsv(&v.to_tsv()).unwrap(), v);
    }

    #[test]
    fn caption_tokenizes_with_padding() {
        let v = Vocab::grammar();
        let t = tokenize(&v, "a red square moves right").unwrap();
        assert_eq!(t.len, 5);
        assert_eq!(&t.ids[..5], &[id(&v, "a"), id(&v, "red"), id(&v, "square"), id(&v, "moves"), id(&v, "right")]);
        assert_eq!(&t.ids[5..], &[PAD_ID; 3]);
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocab::grammar();
        let t = tokenize(&v, "a zzz circle").unwrap();
        assert_eq!(&t.ids[..3], &[id(&v, "a"), UNK_ID, id(&v, "circle")]);
        assert!(tokenize(&v, "   ").is_err());
    }

    #[test]
    fn long_captions_truncate() {
        let v = Vocab::grammar();
        let t = tokenize(&v, "a a a a a a a a a a").unwrap();
        assert_eq!(t.len, MAX_TOKENS);
    }

    #[test]
    fn every_grammar_caption_is_unk_free() {
        let v = Vocab::grammar();
        for shape in Shape::ALL {
            for color in Color::ALL {
                let mut motions: Vec<Option<Motion>> =
                    Direction::ALL.iter().map(|&direction| Some(Motion { direction, speed: 1 })).collect();
                motions.push(None);
                for motion in motions {
                    let spec = ClipSpec {
                        shape,
                        color,
                        motion,
                        start: (5, 5),
                        length_frames: if motion.is_some() { 4 } else { 1 },
                        seed: 0,
                    };
                    let t = tokenize(&v, &caption_of(&spec)).unwrap();
                    assert!(!t.ids.contains(&UNK_ID));
                }
            }
        }
    }

    #[test]
    fn recaption_examples() {
        let s = SynonymTable::builtin();
        assert_eq!(recaption("please show a crimson square going right", &s).unwrap(), "a red square moves right");
        assert_eq!(recaption("a blue circle", &s).unwrap(), "a blue circle");
        assert_eq!(recaption("An Emerald triangle heads upwards!", &s).unwrap(), "a green triangle moves up");
        match recaption("a fast dog", &s) {
            Err(Error::UnresolvablePrompt { missing, .. }) => assert!(missing.contains("shape")),
            other => panic!("{other:?}"),
        }
        assert_eq!(recaption("a <V> sprite moves right", &s).unwrap(), "a <V> sprite moves right");
        assert_eq!(recaption("my <v> going leftward", &s).unwrap(), "a <V> sprite moves left");
    }

    #[test]
    fn subject_activation() {
        let base = Vocab::grammar();
        let before = tokenize(&base, "a <V> square moves right").unwrap();
        assert_eq!(before.ids[1], UNK_ID);
        let ext = extend_vocab_subject(&base).unwrap();
        let after = tokenize(&ext, "a <V> square moves right").unwrap();
        assert_eq!(after.ids[1], SUBJECT_ID);
        for cap in ["a red square moves right", "a blue circle", "a yellow triangle moves down"] {
            assert_eq!(tokenize(&base, cap).unwrap(), tokenize(&ext, cap).unwrap());
        }
        assert!(matches!(extend_vocab_subject(&ext), Err(Error::InvalidState(_))));
        assert_eq!(Vocab::from_tsv(&ext.to_tsv()).unwrap(), ext);
    }

    #[test]
    fn embedding_lookup() {
        let v = Vocab::grammar();
        let table = Tensor::arange(0f32, (v.len() * 128) as f32, &Device::Cpu)
            .unwrap()
            .reshape((v.len(), 128))
            .unwrap();
        let e = embed(&table, &PromptTokens::NULL).unwrap();
        assert_eq!(e.dims(), &[8, 128]);
        let rows = to_vec_f64(&e).unwrap();
        assert!(rows.chunks(128).all(|r| r == &to_vec_f64(&table.get(0).unwrap()).unwrap()[..]));

        let a = embed(&table, &tokenize(&v, "a red square").unwrap()).unwrap();
        let b = embed(&table, &tokenize(&v, "a red square moves").unwrap()).unwrap();
        let (av, bv) = (to_vec_f64(&a).unwrap(), to_vec_f64(&b).unwrap());
        assert_eq!(av[..3 * 128], bv[..3 * 128]);

        let bad = PromptTokens { ids: [99; 8], len: 8 };
        assert!(embed(&table.to_dtype(DType::F64).unwrap(), &bad).is_err());
    }

    #[test]
    fn synonym_table_round_trips() {
        let s = SynonymTable::builtin();
        assert_eq!(SynonymTable::from_tsv(&s.to_tsv()).unwrap(), s);
        assert_eq!(s.canonical("scarlet"), "red");
    }

    fn prompt_words() -> impl Strategy<Value = String> {
        let words = vec![
            "a", "the", "red", "crimson", "navy", "green", "golden", "square", "circle", "triangle", "moves",
            "goes", "left", "upward", "down", "rightward", "please", "big", "<V>", "sprite",
        ];
        proptest::collection::vec(proptest::sample::select(words), 1..8).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn recaption_is_idempotent(p in prompt_words()) {
            let s = SynonymTable::builtin();
            if let Ok(once) = recaption(&p, &s) {
                prop_assert_eq!(recaption(&once, &s).unwrap(), once);
            }
        }
    }
}
