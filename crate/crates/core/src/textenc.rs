//! Character vocabulary and the character-level text encoder.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::datamodel::{Dataset, PoiRecord, SearchRecord};
use crate::error::{Error, Result};
use crate::geocode::LocationEncoder;
use crate::numerics::{bigru_encode, init_bigru, BackwardState, ParamStore, Scalar, Tape, Var};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SEP: usize = 2;
const RESERVED: usize = 3;
pub const TEXT_PREFIX: &str = "text";
/// Historical queries attached to each POI.
pub const TOP_QUERIES: usize = 4;

/// NFKC, lowercase, single spaces, trimmed.
pub fn normalize_query(s: &str) -> String {
    let folded: String = s.nfkc().flat_map(char::to_lowercase).collect();
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn truncate(s: &str, max_len: usize) -> impl Iterator<Item = char> + '_ {
    s.chars().take(max_len)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub codepoint: u32,
    pub index: usize,
    pub frequency: u64,
}

/// Codepoint vocabulary with reserved `[PAD]`, `[UNK]` and `[SEP]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CharVocab {
    entries: Vec<VocabEntry>,
    index: HashMap<char, usize>,
}

impl CharVocab {
    /// Counts codepoints, keeps those seen at least `min_freq` times, and
    /// orders them by frequency then codepoint. `max_size` caps the total
    /// size including reserved symbols.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        min_freq: u64,
        max_size: Option<usize>,
    ) -> Result<Self> {
        let mut counts: BTreeMap<char, u64> = BTreeMap::new();
        for t in texts {
            for c in t.chars() {
                *counts.entry(c).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::EmptyCorpus("vocabulary corpus has no characters"));
        }
        let mut kept: Vec<(char, u64)> =
            counts.into_iter().filter(|&(_, n)| n >= min_freq.max(1)).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        if let Some(cap) = max_size {
            kept.truncate(cap.saturating_sub(RESERVED));
        }
        let entries = kept
            .into_iter()
            .enumerate()
            .map(|(i, (c, n))| VocabEntry {
                codepoint: c as u32,
                index: i + RESERVED,
                frequency: n,
            })
            .collect();
        Self::from_entries(entries)
    }

    fn from_entries(entries: Vec<VocabEntry>) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            let c = char::from_u32(e.codepoint)
                .ok_or_else(|| Error::Validation(format!("invalid codepoint {}", e.codepoint)))?;
            if e.index != i + RESERVED || index.insert(c, e.index).is_some() {
                return Err(Error::Validation(format!(
                    "vocabulary entry {i} is out of order or duplicated"
                )));
            }
        }
        Ok(CharVocab { entries, index })
    }

    /// Catalog names and addresses plus the split's query texts.
    pub fn from_dataset(dataset: &Dataset, min_freq: u64, max_size: Option<usize>) -> Result<Self> {
        let queries: Vec<String> = dataset.records().map(|r| normalize_query(&r.query_text)).collect();
        let texts = dataset
            .catalog
            .pois()
            .iter()
            .flat_map(|p| [p.name.as_str(), p.address.as_str()])
            .chain(queries.iter().map(String::as_str));
        Self::build(texts, min_freq, max_size)
    }

    /// Total size including reserved symbols.
    pub fn len(&self) -> usize {
        self.entries.len() + RESERVED
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn entries(&self) -> &[VocabEntry] {
        &self.entries
    }

    pub fn lookup(&self, c: char) -> usize {
        self.index.get(&c).copied().unwrap_or(UNK)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.entries)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_entries(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s).map_err(|e| Error::load(path, e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextEncoderConfig {
    pub d_c: usize,
    pub d: usize,
    pub max_len: usize,
    pub backward_state: BackwardState,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            d_c: 64,
            d: 128,
            max_len: 30,
            backward_state: BackwardState::Terminal,
        }
    }
}

/// Character-level bidirectional GRU encoder bound to `text.*` parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub vocab: CharVocab,
}

impl TextEncoder {
    pub fn new(config: TextEncoderConfig, vocab: CharVocab) -> Result<Self> {
        if config.d == 0 || config.d % 2 != 0 || config.d_c == 0 || config.max_len == 0 {
            return Err(Error::Config(format!(
                "text encoder needs even d > 0, d_c > 0 and max_len > 0 (got d={}, d_c={}, max_len={})",
                config.d, config.d_c, config.max_len
            )));
        }
        Ok(TextEncoder { config, vocab })
    }

    pub fn init_params<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<()> {
        init_bigru(
            store,
            TEXT_PREFIX,
            self.vocab.len(),
            self.config.d_c,
            self.config.d / 2,
            rng,
        )
    }

    /// Indices of the first `max_len` codepoints; an empty string becomes a
    /// single `[PAD]`.
    pub fn symbols(&self, s: &str) -> Vec<usize> {
        let mut out: Vec<usize> = truncate(s, self.config.max_len)
            .map(|c| self.vocab.lookup(c))
            .collect();
        if out.is_empty() {
            out.push(PAD);
        }
        out
    }

    /// `name [SEP] address`, each side truncated separately.
    pub fn poi_symbols(&self, name: &str, address: &str) -> Vec<usize> {
        let m = self.config.max_len;
        truncate(name, m)
            .map(|c| self.vocab.lookup(c))
            .chain(std::iter::once(SEP))
            .chain(truncate(address, m).map(|c| self.vocab.lookup(c)))
            .collect()
    }

    pub fn query_symbols(&self, query_text: &str) -> Vec<usize> {
        self.symbols(&normalize_query(query_text))
    }

    /// `n × d` encodings of symbol sequences.
    pub fn encode<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        seqs: &[Vec<usize>],
    ) -> Result<Var> {
        bigru_encode(tape, store, TEXT_PREFIX, seqs, self.config.backward_state)
    }
}

/// One string to a `d`-vector.
pub fn encode_text<T: Scalar>(s: &str, enc: &TextEncoder, store: &ParamStore<T>) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let v = enc.encode(&mut tape, store, &[enc.symbols(s)])?;
    Ok(tape.value(v).data().to_vec())
}

/// Text-only and text-plus-location query representations.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryRep<T> {
    pub q: Vec<T>,
    pub q_tilde: Vec<T>,
}

/// POI representation with up to [`TOP_QUERIES`] historical-query rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PoiRep<T> {
    pub p: Vec<T>,
    /// `TOP_QUERIES × d`, zero beyond the valid rows.
    pub q_p: Vec<Vec<T>>,
    pub mask: Vec<bool>,
}

/// Batched `q` and `q̃ = q + G_u` on a tape.
pub fn encode_queries<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    text: &TextEncoder,
    geo: &LocationEncoder,
    queries: &[(&str, f64, f64)],
) -> Result<(Var, Var)> {
    let seqs: Vec<Vec<usize>> = queries.iter().map(|q| text.query_symbols(q.0)).collect();
    let coords: Vec<(f64, f64)> = queries.iter().map(|q| (q.1, q.2)).collect();
    let q = text.encode(tape, store, &seqs)?;
    let g = geo.encode(tape, store, &coords)?;
    let q_tilde = tape.add(q, g)?;
    Ok((q, q_tilde))
}

/// Batched `P_i = text(name [SEP] address) + G_i`.
pub fn encode_pois<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    text: &TextEncoder,
    geo: &LocationEncoder,
    pois: &[&PoiRecord],
) -> Result<Var> {
    let seqs: Vec<Vec<usize>> = pois.iter().map(|p| text.poi_symbols(&p.name, &p.address)).collect();
    let coords: Vec<(f64, f64)> = pois.iter().map(|p| (p.lat, p.lon)).collect();
    let t = text.encode(tape, store, &seqs)?;
    let g = geo.encode(tape, store, &coords)?;
    tape.add(t, g)
}

pub fn make_query_rep<T: Scalar>(
    record: &SearchRecord,
    text: &TextEncoder,
    geo: &LocationEncoder,
    store: &ParamStore<T>,
) -> Result<QueryRep<T>> {
    record.validate()?;
    let mut tape = Tape::new();
    let (q, qt) = encode_queries(
        &mut tape,
        store,
        text,
        geo,
        &[(&record.query_text, record.user_lat, record.user_lon)],
    )?;
    Ok(QueryRep {
        q: tape.value(q).data().to_vec(),
        q_tilde: tape.value(qt).data().to_vec(),
    })
}

/// `top_queries` holds up to four `(text, lat, lon)` historical queries;
/// extra entries are an error.
pub fn make_poi_rep<T: Scalar>(
    poi: &PoiRecord,
    top_queries: &[(&str, f64, f64)],
    text: &TextEncoder,
    geo: &LocationEncoder,
    store: &ParamStore<T>,
) -> Result<PoiRep<T>> {
    poi.validate()?;
    if top_queries.len() > TOP_QUERIES {
        return Err(Error::Validation(format!(
            "{} historical queries for POI `{}` (at most {TOP_QUERIES})",
            top_queries.len(),
            poi.poi_id
        )));
    }
    let d = text.config.d;
    let mut tape = Tape::new();
    let p = encode_pois(&mut tape, store, text, geo, &[poi])?;
    let p = tape.value(p).data().to_vec();
    let mut q_p = vec![vec![T::zero(); d]; TOP_QUERIES];
    let mut mask = vec![false; TOP_QUERIES];
    if !top_queries.is_empty() {
        let (_, qt) = encode_queries(&mut tape, store, text, geo, top_queries)?;
        let qt = tape.value(qt);
        for (i, row) in q_p.iter_mut().enumerate().take(top_queries.len()) {
            row.copy_from_slice(qt.row(i));
            mask[i] = true;
        }
    }
    Ok(PoiRep { p, q_p, mask })
}
