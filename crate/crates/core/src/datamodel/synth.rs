//! Synthetic catalog and search logs.
//!
//! POIs are grouped into families that share a base name ("kamori tower",
//! "kamori park") and sit close together in one city. Each POI is written in
//! one of several synthetic languages; language `k > 0` is a letter-by-letter
//! transliteration of Latin into a different Unicode block, so the same name
//! in two languages shares no characters. Queries are noisy renderings of the
//! clicked POI's name, sometimes in another language or mixing languages per
//! word. Click popularity follows a Zipf law over a random POI ranking, and
//! sessions tend to move between POIs of the same family or city.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Catalog, PoiRecord, SearchRecord, DEFAULT_SESSION_TIMEOUT_S};
use crate::error::{Error, Result};
use crate::numerics::{RngStreams, StreamRng};

/// First code point of `a` for each non-Latin language.
const SCRIPT_BASES: [u32; 5] = [0x03B1, 0x0430, 0x30A1, 0x0561, 0x05D0];

const TYPE_WORDS: [&str; 16] = [
    "tower", "park", "station", "museum", "temple", "market", "hotel", "garden", "bridge", "cafe",
    "hall", "gate", "plaza", "library", "harbor", "castle",
];

const CONSONANTS: &[u8] = b"bdfghjklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_pois: usize,
    pub num_queries: usize,
    pub languages: usize,
    /// Zipf exponent of POI popularity.
    pub popularity_skew: f64,
    /// Per-character typo probability.
    pub noise_rate: f64,
    pub seed: u64,
    /// Probability that a query is written in a language other than the POI's.
    pub cross_language_rate: f64,
    /// Probability that a query picks a language per word.
    pub mixed_rate: f64,
    /// Probability that a query is a prefix of the name.
    pub truncate_rate: f64,
    pub max_family_size: usize,
    /// Probability of one more search in the current session.
    pub session_continue: f64,
    /// Probability that the next POI in a session is a family sibling.
    pub sibling_rate: f64,
    pub candidates_per_query: usize,
    pub no_click_rate: f64,
    pub pois_per_city: usize,
    /// Half-width in degrees of the box around the clicked POI that the
    /// user location is drawn from.
    pub user_spread: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_pois: 200,
            num_queries: 1000,
            languages: 2,
            popularity_skew: 1.1,
            noise_rate: 0.03,
            seed: 7,
            cross_language_rate: 0.4,
            mixed_rate: 0.1,
            truncate_rate: 0.2,
            max_family_size: 3,
            session_continue: 0.6,
            sibling_rate: 0.7,
            candidates_per_query: 10,
            no_click_rate: 0.02,
            pois_per_city: 50,
            user_spread: 0.02,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.num_pois == 0 || self.num_queries == 0 {
            return Err(Error::Config("num_pois and num_queries must be at least 1".into()));
        }
        if self.languages == 0 || self.languages > SCRIPT_BASES.len() + 1 {
            return Err(Error::Config(format!(
                "languages must be in 1..={}",
                SCRIPT_BASES.len() + 1
            )));
        }
        let probs = [
            self.noise_rate,
            self.cross_language_rate,
            self.mixed_rate,
            self.truncate_rate,
            self.session_continue,
            self.sibling_rate,
            self.no_click_rate,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) || self.session_continue >= 1.0 {
            return Err(Error::Config("rates must lie in [0, 1]".into()));
        }
        if self.popularity_skew < 0.0 || self.max_family_size == 0 || self.pois_per_city == 0 {
            return Err(Error::Config("invalid skew, family size or city size".into()));
        }
        if !(self.user_spread > 0.0 && self.user_spread <= 10.0) {
            return Err(Error::Config(format!("user_spread {} outside (0, 10]", self.user_spread)));
        }
        Ok(())
    }
}

/// Generated catalog and time-ordered log.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthOutput {
    pub catalog: Catalog,
    pub records: Vec<SearchRecord>,
    /// Native language of each catalog POI, in catalog order.
    pub poi_language: Vec<usize>,
    /// Family index of each catalog POI.
    pub poi_family: Vec<usize>,
}

/// Renders Latin text in synthetic language `lang` (0 is Latin itself).
pub fn transliterate(text: &str, lang: usize) -> String {
    if lang == 0 {
        return text.to_string();
    }
    let base = SCRIPT_BASES[(lang - 1) % SCRIPT_BASES.len()];
    text.chars()
        .map(|c| {
            if c.is_ascii_lowercase() {
                char::from_u32(base + (c as u32 - 'a' as u32)).unwrap_or(c)
            } else {
                c
            }
        })
        .collect()
}

/// Language of a character under [`transliterate`]: `Some(0)` for Latin
/// letters, `Some(k)` for script `k`, `None` for digits, spaces and others.
pub fn script_of(c: char) -> Option<usize> {
    if c.is_ascii_lowercase() {
        return Some(0);
    }
    let cp = c as u32;
    SCRIPT_BASES
        .iter()
        .position(|&b| (b..b + 26).contains(&cp))
        .map(|i| i + 1)
}

struct Poi {
    words: Vec<String>,
    lang: usize,
    family: usize,
    city: usize,
    lat: f64,
    lon: f64,
}

fn make_lexicon(rng: &mut StreamRng, n: usize) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
            w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
        }
        if !TYPE_WORDS.contains(&w.as_str()) && seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn clamp_lat(x: f64) -> f64 {
    x.clamp(-89.9, 89.9)
}

fn wrap_lon(x: f64) -> f64 {
    let mut v = x;
    while v > 180.0 {
        v -= 360.0;
    }
    while v < -180.0 {
        v += 360.0;
    }
    v
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

fn sample_weighted(rng: &mut StreamRng, cumulative: &[f64]) -> usize {
    let total = *cumulative.last().expect("non-empty");
    let x = rng.gen::<f64>() * total;
    cumulative.partition_point(|&c| c <= x).min(cumulative.len() - 1)
}

fn typo(word: &str, rate: f64, rng: &mut StreamRng) -> String {
    let mut out = String::with_capacity(word.len() + 2);
    for c in word.chars() {
        if rng.gen::<f64>() >= rate {
            out.push(c);
            continue;
        }
        match rng.gen_range(0..3) {
            0 => out.push((b'a' + rng.gen_range(0..26u8)) as char),
            1 => {}
            _ => {
                out.push(c);
                out.push(c);
            }
        }
    }
    if out.is_empty() {
        word.to_string()
    } else {
        out
    }
}

fn make_query(poi: &Poi, cfg: &SynthConfig, rng: &mut StreamRng) -> String {
    let query_lang = if cfg.languages > 1 && rng.gen::<f64>() < cfg.cross_language_rate {
        let mut l = rng.gen_range(0..cfg.languages - 1);
        if l >= poi.lang {
            l += 1;
        }
        l
    } else {
        poi.lang
    };
    let mut words: Vec<String> = poi.words.iter().map(|w| typo(w, cfg.noise_rate, rng)).collect();
    if rng.gen::<f64>() < cfg.truncate_rate {
        let full = words.join(" ");
        let n = full.chars().count();
        let keep = ((n as f64) * 0.7).ceil().max(3.0) as usize;
        words = full
            .chars()
            .take(keep)
            .collect::<String>()
            .split(' ')
            .filter(|w| !w.is_empty())
            .map(str::to_string)
            .collect();
    }
    let mixed = cfg.languages > 1 && rng.gen::<f64>() < cfg.mixed_rate;
    words
        .iter()
        .map(|w| {
            let lang = if mixed && rng.gen_bool(0.5) {
                poi.lang
            } else {
                query_lang
            };
            transliterate(w, lang)
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// Generates a catalog and search log; a pure function of `cfg`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let streams = RngStreams::new(cfg.seed);
    let mut lex_rng = streams.stream("synth.lexicon");
    let mut poi_rng = streams.stream("synth.pois");
    let mut log_rng = streams.stream("synth.logs");

    let num_cities = cfg.num_pois.div_ceil(cfg.pois_per_city).max(1);
    let lexicon = make_lexicon(&mut lex_rng, 2 * cfg.num_pois + num_cities + 8);
    let mut lex_iter = lexicon.iter().cloned();
    let city_centers: Vec<(f64, f64)> = (0..num_cities)
        .map(|_| (poi_rng.gen_range(-55.0..55.0), poi_rng.gen_range(-175.0..175.0)))
        .collect();
    let districts: Vec<String> = (0..num_cities).map(|_| lex_iter.next().unwrap()).collect();
    let streets: Vec<String> = lex_iter.by_ref().take(8).collect();

    let mut pois: Vec<Poi> = Vec::with_capacity(cfg.num_pois);
    let mut families: Vec<Vec<usize>> = Vec::new();
    while pois.len() < cfg.num_pois {
        let size = poi_rng
            .gen_range(1..=cfg.max_family_size)
            .min(cfg.num_pois - pois.len());
        let base = lex_iter.next().expect("lexicon sized for catalog");
        let mut base_words = vec![base];
        if poi_rng.gen_bool(0.25) {
            base_words.push(lex_iter.next().expect("lexicon sized for catalog"));
        }
        let city = poi_rng.gen_range(0..num_cities);
        let (clat, clon) = city_centers[city];
        let flat = clat + poi_rng.gen_range(-0.15..0.15);
        let flon = clon + poi_rng.gen_range(-0.15..0.15);
        let mut types: Vec<&str> = TYPE_WORDS.to_vec();
        types.shuffle(&mut poi_rng);
        let fam = families.len();
        let mut members = Vec::new();
        for t in types.into_iter().take(size) {
            let mut words = base_words.clone();
            words.push(t.to_string());
            members.push(pois.len());
            pois.push(Poi {
                words,
                lang: poi_rng.gen_range(0..cfg.languages),
                family: fam,
                city,
                lat: clamp_lat(flat + poi_rng.gen_range(-0.004..0.004)),
                lon: wrap_lon(flon + poi_rng.gen_range(-0.004..0.004)),
            });
        }
        families.push(members);
    }

    let catalog_recs: Vec<PoiRecord> = pois
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let street = &streets[i % streets.len()];
            let addr = format!("{} {} {}", 1 + (i * 37) % 199, street, districts[p.city]);
            PoiRecord {
                poi_id: format!("poi-{i:05}"),
                name: transliterate(&p.words.join(" "), p.lang),
                address: transliterate(&addr, p.lang),
                lat: round6(p.lat),
                lon: round6(p.lon),
            }
        })
        .collect();
    let catalog = Catalog::new(catalog_recs)?;

    // Popularity: Zipf weights over a random ranking.
    let mut ranking: Vec<usize> = (0..pois.len()).collect();
    ranking.shuffle(&mut poi_rng);
    let mut weight = vec![0.0; pois.len()];
    for (rank, &i) in ranking.iter().enumerate() {
        weight[i] = 1.0 / ((rank + 1) as f64).powf(cfg.popularity_skew);
    }
    let cumulative = |idx: &[usize]| -> Vec<f64> {
        idx.iter()
            .scan(0.0, |acc, &i| {
                *acc += weight[i];
                Some(*acc)
            })
            .collect()
    };
    let all: Vec<usize> = (0..pois.len()).collect();
    let global_cum = cumulative(&all);
    let city_members: Vec<Vec<usize>> = (0..num_cities)
        .map(|c| all.iter().copied().filter(|&i| pois[i].city == c).collect())
        .collect();
    let city_cum: Vec<Vec<f64>> = city_members.iter().map(|m| cumulative(m)).collect();

    let num_users = (cfg.num_queries / 8).max(1);
    let mut user_clock: Vec<i64> = (0..num_users)
        .map(|_| 1_600_000_000 + log_rng.gen_range(0..86_400))
        .collect();
    let n_cand = cfg.candidates_per_query.max(1).min(pois.len());
    let mut records = Vec::with_capacity(cfg.num_queries);
    while records.len() < cfg.num_queries {
        let user = log_rng.gen_range(0..num_users);
        user_clock[user] += DEFAULT_SESSION_TIMEOUT_S + log_rng.gen_range(600..172_800);
        let mut current = all[sample_weighted(&mut log_rng, &global_cum)];
        loop {
            let p = &pois[current];
            let query = make_query(p, cfg, &mut log_rng);
            let user_lat = clamp_lat(p.lat + log_rng.gen_range(-cfg.user_spread..cfg.user_spread));
            let user_lon = wrap_lon(p.lon + log_rng.gen_range(-cfg.user_spread..cfg.user_spread));

            let mut shown = vec![current];
            let same_city = &city_members[p.city];
            let mut guard = 0;
            while shown.len() < n_cand && guard < 50 * n_cand {
                guard += 1;
                let cand = if log_rng.gen_bool(0.5) && same_city.len() > 1 {
                    same_city[log_rng.gen_range(0..same_city.len())]
                } else {
                    log_rng.gen_range(0..pois.len())
                };
                if !shown.contains(&cand) {
                    shown.push(cand);
                }
            }
            shown.shuffle(&mut log_rng);
            let clicked = log_rng.gen::<f64>() >= cfg.no_click_rate;
            records.push(SearchRecord {
                user_id: format!("u{user:05}"),
                timestamp: user_clock[user],
                query_text: query,
                user_lat: round6(user_lat),
                user_lon: round6(user_lon),
                clicked_poi_id: clicked.then(|| format!("poi-{current:05}")),
                shown_poi_ids: Some(shown.iter().map(|i| format!("poi-{i:05}")).collect()),
            });
            if records.len() >= cfg.num_queries || !log_rng.gen_bool(cfg.session_continue) {
                break;
            }
            user_clock[user] += log_rng.gen_range(15..600);
            let fam = &families[p.family];
            current = if fam.len() > 1 && log_rng.gen_bool(cfg.sibling_rate) {
                let others: Vec<usize> = fam.iter().copied().filter(|&i| i != current).collect();
                others[log_rng.gen_range(0..others.len())]
            } else {
                let c = p.city;
                city_members[c][sample_weighted(&mut log_rng, &city_cum[c])]
            };
        }
    }
    records.sort_by(|a, b| (a.timestamp, &a.user_id).cmp(&(b.timestamp, &b.user_id)));

    Ok(SynthOutput {
        catalog,
        records,
        poi_language: pois.iter().map(|p| p.lang).collect(),
        poi_family: pois.iter().map(|p| p.family).collect(),
    })
}
