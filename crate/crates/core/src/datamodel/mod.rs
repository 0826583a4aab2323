//! Catalog and search-log records, ingestion, sessionization and the
//! synthetic log generator.

mod ingest;
mod session;
pub mod synth;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ingest::{
    ingest_catalog, ingest_logs, read_logs_lenient, write_catalog, write_logs, LineError,
    ValidationReport,
};
pub use session::{sessionize, split_sessions, Session, DEFAULT_SESSION_TIMEOUT_S};
pub use synth::{synth_generate, SynthConfig, SynthOutput};

/// A catalog entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoiRecord {
    pub poi_id: String,
    pub name: String,
    pub address: String,
    pub lat: f64,
    pub lon: f64,
}

impl PoiRecord {
    pub fn validate(&self) -> Result<()> {
        if self.poi_id.is_empty() {
            return Err(Error::Validation("empty poi_id".into()));
        }
        if self.name.is_empty() {
            return Err(Error::Validation(format!("POI `{}` has an empty name", self.poi_id)));
        }
        check_coords(self.lat, self.lon)
    }
}

/// One logged search interaction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub user_id: String,
    pub timestamp: i64,
    pub query_text: String,
    pub user_lat: f64,
    pub user_lon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clicked_poi_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shown_poi_ids: Option<Vec<String>>,
}

impl SearchRecord {
    pub fn validate(&self) -> Result<()> {
        if self.timestamp < 0 {
            return Err(Error::Validation(format!("negative timestamp {}", self.timestamp)));
        }
        check_coords(self.user_lat, self.user_lon)?;
        if let (Some(c), Some(shown)) = (&self.clicked_poi_id, &self.shown_poi_ids) {
            if !shown.contains(c) {
                return Err(Error::Validation(format!(
                    "clicked POI `{c}` is not among the shown POIs"
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_coords(lat: f64, lon: f64) -> Result<()> {
    if !(-90.0..=90.0).contains(&lat) {
        return Err(Error::Validation(format!("latitude {lat} outside [-90, 90]")));
    }
    if !(-180.0..=180.0).contains(&lon) {
        return Err(Error::Validation(format!("longitude {lon} outside [-180, 180]")));
    }
    Ok(())
}

/// POIs in file order with an id index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Catalog {
    pois: Vec<PoiRecord>,
    index: HashMap<String, usize>,
}

impl Catalog {
    pub fn new(pois: Vec<PoiRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(pois.len());
        for (i, p) in pois.iter().enumerate() {
            p.validate()?;
            if index.insert(p.poi_id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate poi_id `{}`", p.poi_id)));
            }
        }
        Ok(Catalog { pois, index })
    }

    pub fn len(&self) -> usize {
        self.pois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pois.is_empty()
    }

    pub fn pois(&self) -> &[PoiRecord] {
        &self.pois
    }

    pub fn get(&self, poi_id: &str) -> Option<&PoiRecord> {
        self.index.get(poi_id).map(|&i| &self.pois[i])
    }

    pub fn position(&self, poi_id: &str) -> Option<usize> {
        self.index.get(poi_id).copied()
    }

    pub fn require(&self, poi_id: &str) -> Result<usize> {
        self.position(poi_id).ok_or_else(|| Error::Lookup {
            kind: "poi_id",
            id: poi_id.to_string(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

/// Sessions of one split over a shared catalog.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub catalog: Catalog,
    pub sessions: Vec<Session>,
    pub split: Split,
}

impl Dataset {
    pub fn new(catalog: Catalog, sessions: Vec<Session>, split: Split) -> Result<Self> {
        for s in &sessions {
            for r in &s.records {
                if let Some(c) = &r.clicked_poi_id {
                    catalog.require(c)?;
                }
                for id in r.shown_poi_ids.iter().flatten() {
                    catalog.require(id)?;
                }
            }
        }
        Ok(Dataset {
            catalog,
            sessions,
            split,
        })
    }

    pub fn records(&self) -> impl Iterator<Item = &SearchRecord> {
        self.sessions.iter().flat_map(|s| s.records.iter())
    }

    /// Records with a click, in session order.
    pub fn clicked_records(&self) -> impl Iterator<Item = &SearchRecord> {
        self.records().filter(|r| r.clicked_poi_id.is_some())
    }
}
