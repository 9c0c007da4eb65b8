use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Reserved tokens. They always occupy ids `0..NUM_SPECIALS` in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum Special {
    Pad = 0,
    Unk = 1,
    Bos = 2,
    Eos = 3,
    Mask = 4,
}

pub const NUM_SPECIALS: usize = 5;

impl Special {
    pub const ALL: [Special; NUM_SPECIALS] = [Special::Pad, Special::Unk, Special::Bos, Special::Eos, Special::Mask];

    pub fn id(self) -> u32 {
        self as u32
    }

    pub fn token(self) -> &'static str {
        match self {
            Special::Pad => "<pad>",
            Special::Unk => "<unk>",
            Special::Bos => "<s>",
            Special::Eos => "</s>",
            Special::Mask => "<mask>",
        }
    }
}

/// Direction tags look like `<2xx>`; they are reserved, appended after the
/// regular tokens, and never sampled as random replacements.
pub fn is_tag_token(s: &str) -> bool {
    s.len() > 3 && s.starts_with("<2") && s.ends_with('>')
}

fn is_reserved_string(s: &str) -> bool {
    is_tag_token(s) || Special::ALL.iter().any(|sp| sp.token() == s)
}

/// Bidirectional token/id table shared by encoder and decoder.
///
/// Layout: specials at `0..5`, regular tokens next, direction tags last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    num_regular: usize,
}

/// Keeps the `max_size - 5` most frequent tokens (ties broken
/// lexicographically) plus the specials.
pub fn build_vocab<I, S>(tokenized: I, max_size: usize) -> Result<Vocab>
where
    I: IntoIterator,
    I::Item: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if max_size < NUM_SPECIALS + 1 {
        return Err(Error::InvalidArgument(format!(
            "vocabulary size {max_size} leaves no room beyond the {NUM_SPECIALS} specials"
        )));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut seen_any = false;
    for sent in tokenized {
        for t in sent {
            seen_any = true;
            let t = t.as_ref();
            if !is_reserved_string(t) {
                *counts.entry(t.to_string()).or_default() += 1;
            }
        }
    }
    if !seen_any {
        return Err(Error::Empty("token stream is empty".into()));
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - NUM_SPECIALS);
    Ok(Vocab::from_regular(ranked.into_iter().map(|(t, _)| t)))
}

impl Vocab {
    /// Specials followed by the given regular tokens (duplicates ignored).
    pub fn from_regular<I: IntoIterator<Item = String>>(tokens: I) -> Self {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
            num_regular: 0,
        };
        for sp in Special::ALL {
            v.insert(sp.token().to_string());
        }
        for t in tokens {
            if !v.index.contains_key(&t) && !is_reserved_string(&t) {
                v.insert(t);
                v.num_regular += 1;
            }
        }
        v
    }

    fn insert(&mut self, t: String) -> u32 {
        let id = self.tokens.len() as u32;
        self.index.insert(t.clone(), id);
        self.tokens.push(t);
        id
    }

    /// Appends direction tags. Returns their ids.
    pub fn add_tags(&mut self, tags: &[&str]) -> Result<Vec<u32>> {
        let mut ids = Vec::new();
        for t in tags {
            if !is_tag_token(t) {
                return Err(Error::InvalidArgument(format!("`{t}` is not a direction tag (`<2..>`)")));
            }
            match self.index.get(*t) {
                Some(id) => ids.push(*id),
                None => ids.push(self.insert(t.to_string())),
            }
        }
        Ok(ids)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids of ordinary tokens (no specials, no tags).
    pub fn regular_ids(&self) -> std::ops::Range<u32> {
        NUM_SPECIALS as u32..(NUM_SPECIALS + self.num_regular) as u32
    }

    pub fn is_regular(&self, id: u32) -> bool {
        self.regular_ids().contains(&id)
    }

    pub fn tag_ids(&self) -> std::ops::Range<u32> {
        (NUM_SPECIALS + self.num_regular) as u32..self.tokens.len() as u32
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens
            .iter()
            .map(|t| self.id(t.as_ref()).unwrap_or(Special::Unk.id()))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| {
                self.token(id)
                    .map(str::to_string)
                    .ok_or(Error::IdOutOfRange { id, size: self.len() })
            })
            .collect()
    }

    /// Decodes ids to tokens, dropping specials and tags.
    pub fn decode_regular(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| self.is_regular(id))
            .map(|&id| self.tokens[id as usize].clone())
            .collect()
    }

    /// Sub-vocabulary with the specials and the listed regular tokens, in
    /// this vocabulary's id order.
    pub fn restrict<'a, I: IntoIterator<Item = &'a str>>(&self, keep: I) -> Vocab {
        let mut wanted: Vec<u32> = keep
            .into_iter()
            .filter_map(|t| self.id(t))
            .filter(|&id| self.is_regular(id))
            .collect();
        wanted.sort_unstable();
        wanted.dedup();
        Vocab::from_regular(wanted.into_iter().map(|id| self.tokens[id as usize].clone()))
    }

    /// `token<TAB>id` lines, specials first.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(&format!("{t}\t{i}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocab> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::parse(path, i + 1, "expected `token<TAB>id`"))?;
            let id: usize = id.parse().map_err(|_| Error::parse(path, i + 1, "bad id"))?;
            if id != i {
                return Err(Error::parse(path, i + 1, format!("ids must be dense and ordered, found {id}")));
            }
            tokens.push(tok.to_string());
        }
        for sp in Special::ALL {
            if tokens.get(sp.id() as usize).map(String::as_str) != Some(sp.token()) {
                return Err(Error::parse(path, sp.id() as usize + 1, format!("expected special {}", sp.token())));
            }
        }
        let tags: Vec<&str> = tokens[NUM_SPECIALS..]
            .iter()
            .skip_while(|t| !is_tag_token(t))
            .map(String::as_str)
            .collect();
        let regular = tokens.len() - NUM_SPECIALS - tags.len();
        let mut v = Vocab::from_regular(tokens[NUM_SPECIALS..NUM_SPECIALS + regular].iter().cloned());
        if v.num_regular != regular {
            return Err(Error::parse(path, 0, "duplicate or reserved regular tokens"));
        }
        v.add_tags(&tags).map_err(|e| Error::parse(path, 0, e.to_string()))?;
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_take_lowest_ids() {
        let v = build_vocab([vec!["a", "b", "c", "a"]], 100).unwrap();
        assert_eq!(v.len(), 8);
        for sp in Special::ALL {
            assert_eq!(v.id(sp.token()), Some(sp.id()));
        }
        assert_eq!(v.id("a"), Some(5));
    }

    #[test]
    fn unknown_token_maps_to_unk() {
        let v = build_vocab([vec!["a"]], 10).unwrap();
        assert_eq!(v.encode(&["a", "zzz"]), vec![5, Special::Unk.id()]);
    }

    #[test]
    fn frequency_ties_broken_lexicographically() {
        let v = build_vocab([vec!["b", "a"]], 6).unwrap();
        assert_eq!(v.len(), 6);
        assert!(v.id("a").is_some());
        assert!(v.id("b").is_none());
    }

    #[test]
    fn too_small_rejected() {
        assert!(build_vocab([vec!["a"]], 5).is_err());
        assert!(build_vocab(Vec::<Vec<&str>>::new(), 10).is_err());
    }

    #[test]
    fn tags_are_reserved() {
        let mut v = build_vocab([vec!["x", "y"]], 10).unwrap();
        let ids = v.add_tags(&["<2a>", "<2b>"]).unwrap();
        assert_eq!(ids, vec![7, 8]);
        assert_eq!(v.regular_ids(), 5..7);
        assert_eq!(v.tag_ids(), 7..9);
        assert!(v.add_tags(&["plain"]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let mut v = build_vocab([vec!["x", "y", "x"]], 10).unwrap();
        v.add_tags(&["<2a>"]).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        v.save(f.path()).unwrap();
        assert_eq!(Vocab::load(f.path()).unwrap(), v);
    }

    #[test]
    fn restrict_keeps_order_and_specials() {
        let v = build_vocab([vec!["a", "a", "a", "b", "b", "c"]], 10).unwrap();
        let r = v.restrict(["c", "a", "nope"]);
        assert_eq!(r.tokens()[NUM_SPECIALS..], ["a".to_string(), "c".to_string()]);
    }

    proptest::proptest! {
        #[test]
        fn encode_inverts_decode(ids in proptest::collection::vec(0u32..12, 0..30)) {
            let v = build_vocab([vec!["p", "q", "r", "s", "t", "u", "w"]], 20).unwrap();
            let toks = v.decode(&ids).unwrap();
            proptest::prop_assert_eq!(v.encode(&toks), ids);
        }
    }
}
