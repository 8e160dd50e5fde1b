//! Token inventory and language tags.
//!
//! Vocabulary file format: one token per line, `surface<TAB>lang` with lang
//! `EN` or `CN`; line number + 1 is the token id (id 0 is reserved for the
//! blank). The MASK and EOS symbols are appended automatically as ids V+1 and
//! V+2 and never appear in the file.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Lang {
    En,
    Cn,
    Special,
}

impl Lang {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "EN" => Some(Lang::En),
            "CN" => Some(Lang::Cn),
            _ => None,
        }
    }

    fn file_tag(self) -> &'static str {
        match self {
            Lang::En => "EN",
            Lang::Cn => "CN",
            Lang::Special => "SPECIAL",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    surfaces: Vec<String>,
    langs: Vec<Lang>,
    by_surface: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(entries: Vec<(String, Lang)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidArg("empty vocabulary".into()));
        }
        let mut surfaces = Vec::with_capacity(entries.len());
        let mut langs = Vec::with_capacity(entries.len());
        let mut by_surface = HashMap::new();
        for (i, (surface, lang)) in entries.into_iter().enumerate() {
            if surface.is_empty() || surface.contains(char::is_whitespace) {
                return Err(Error::InvalidArg(format!(
                    "bad token surface {surface:?} (empty or contains whitespace)"
                )));
            }
            if lang == Lang::Special {
                return Err(Error::InvalidArg(
                    "vocabulary entries must be EN or CN".into(),
                ));
            }
            if by_surface.insert(surface.clone(), i + 1).is_some() {
                return Err(Error::InvalidArg(format!("duplicate surface {surface:?}")));
            }
            surfaces.push(surface);
            langs.push(lang);
        }
        Ok(Self {
            surfaces,
            langs,
            by_surface,
        })
    }

    /// Number of real tokens (V). Ids run 1..=V.
    pub fn size(&self) -> usize {
        self.surfaces.len()
    }

    pub fn blank_id(&self) -> usize {
        crate::ctc::BLANK
    }

    pub fn mask_id(&self) -> usize {
        self.size() + 1
    }

    pub fn eos_id(&self) -> usize {
        self.size() + 2
    }

    pub fn id_of(&self, surface: &str) -> Option<usize> {
        self.by_surface.get(surface).copied()
    }

    pub fn surface(&self, id: usize) -> Result<&str> {
        if id >= 1 && id <= self.size() {
            Ok(&self.surfaces[id - 1])
        } else {
            Err(Error::UnknownToken {
                id,
                valid: format!("1..={}", self.size()),
            })
        }
    }

    /// Language tags for the full id range 0..=V+2 (specials tagged SPECIAL).
    pub fn language_map(&self) -> LanguageMap {
        let mut tags = Vec::with_capacity(self.size() + 3);
        tags.push(Lang::Special); // blank
        tags.extend(self.langs.iter().copied());
        tags.push(Lang::Special); // MASK
        tags.push(Lang::Special); // EOS
        LanguageMap { tags }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for (surface, lang) in self.surfaces.iter().zip(&self.langs) {
            out.push_str(surface);
            out.push('\t');
            out.push_str(lang.file_tag());
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (surface, lang_str) = line.split_once('\t').ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                reason: format!("line {}: expected surface<TAB>lang", lineno + 1),
            })?;
            let lang = Lang::parse(lang_str).ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                reason: format!("line {}: unknown language {lang_str:?}", lineno + 1),
            })?;
            entries.push((surface.to_string(), lang));
        }
        Vocabulary::new(entries)
    }
}

/// Per-token-id language tag, total over ids 0..=V+2.
#[derive(Clone, Debug, PartialEq)]
pub struct LanguageMap {
    tags: Vec<Lang>,
}

impl LanguageMap {
    pub fn tag(&self, id: usize) -> Result<Lang> {
        self.tags.get(id).copied().ok_or(Error::UnknownToken {
            id,
            valid: format!("0..{}", self.tags.len()),
        })
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy_vocab() -> Vocabulary {
        Vocabulary::new(vec![
            ("en1".into(), Lang::En),
            ("en2".into(), Lang::En),
            ("cn1".into(), Lang::Cn),
            ("cn2".into(), Lang::Cn),
        ])
        .unwrap()
    }

    #[test]
    fn ids_follow_line_order() {
        let v = toy_vocab();
        assert_eq!(v.id_of("en1"), Some(1));
        assert_eq!(v.id_of("cn2"), Some(4));
        assert_eq!(v.surface(3).unwrap(), "cn1");
        assert_eq!(v.mask_id(), 5);
        assert_eq!(v.eos_id(), 6);
    }

    #[test]
    fn language_map_is_total_with_special_ends() {
        let v = toy_vocab();
        let map = v.language_map();
        assert_eq!(map.len(), 7);
        assert_eq!(map.tag(0).unwrap(), Lang::Special);
        assert_eq!(map.tag(1).unwrap(), Lang::En);
        assert_eq!(map.tag(4).unwrap(), Lang::Cn);
        assert_eq!(map.tag(v.mask_id()).unwrap(), Lang::Special);
        assert_eq!(map.tag(v.eos_id()).unwrap(), Lang::Special);
        assert!(map.tag(7).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.tsv");
        let v = toy_vocab();
        v.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }

    #[test]
    fn duplicate_surface_rejected() {
        let err = Vocabulary::new(vec![
            ("tok".into(), Lang::En),
            ("tok".into(), Lang::Cn),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }
}
