use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::SearchRecord;
use crate::numerics::RngStreams;

pub const DEFAULT_SESSION_TIMEOUT_S: i64 = 1800;

/// Time-ordered interactions of one user with no gap above the timeout.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub user_id: String,
    pub records: Vec<SearchRecord>,
}

impl Session {
    /// Clicked POIs in order; records without a click are skipped.
    pub fn clicked_pois(&self) -> Vec<&str> {
        self.records
            .iter()
            .filter_map(|r| r.clicked_poi_id.as_deref())
            .collect()
    }
}

/// Groups records per user, orders them by time (stable for equal
/// timestamps) and cuts wherever consecutive records are more than
/// `timeout_s` apart. Sessions come out ordered by user id, then time.
pub fn sessionize(records: &[SearchRecord], timeout_s: i64) -> Vec<Session> {
    assert!(timeout_s > 0, "session timeout must be positive");
    let mut by_user: BTreeMap<&str, Vec<&SearchRecord>> = BTreeMap::new();
    for r in records {
        by_user.entry(r.user_id.as_str()).or_default().push(r);
    }
    let mut out = Vec::new();
    for (user, mut recs) in by_user {
        recs.sort_by_key(|r| r.timestamp);
        let mut current: Vec<SearchRecord> = Vec::new();
        for r in recs {
            if let Some(last) = current.last() {
                if r.timestamp - last.timestamp > timeout_s {
                    out.push(Session {
                        user_id: user.to_string(),
                        records: std::mem::take(&mut current),
                    });
                }
            }
            current.push(r.clone());
        }
        if !current.is_empty() {
            out.push(Session {
                user_id: user.to_string(),
                records: current,
            });
        }
    }
    out
}

/// Seeded session-level split into (train, valid, test) by fractions of
/// the session count; the test split takes the remainder.
pub fn split_sessions(
    sessions: Vec<Session>,
    train_frac: f64,
    valid_frac: f64,
    seed: u64,
) -> (Vec<Session>, Vec<Session>, Vec<Session>) {
    let n = sessions.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut RngStreams::new(seed).stream("split"));
    let n_train = ((n as f64) * train_frac).round() as usize;
    let n_valid = (((n as f64) * valid_frac).round() as usize).min(n - n_train.min(n));
    let mut tag = vec![2u8; n];
    for (rank, &i) in order.iter().enumerate() {
        tag[i] = if rank < n_train {
            0
        } else if rank < n_train + n_valid {
            1
        } else {
            2
        };
    }
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for (s, t) in sessions.into_iter().zip(tag) {
        match t {
            0 => tr.push(s),
            1 => va.push(s),
            _ => te.push(s),
        }
    }
    (tr, va, te)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(user: &str, t: i64) -> SearchRecord {
        SearchRecord {
            user_id: user.into(),
            timestamp: t,
            query_text: format!("q{t}"),
            user_lat: 0.0,
            user_lon: 0.0,
            clicked_poi_id: None,
            shown_poi_ids: None,
        }
    }

    fn sizes(s: &[Session]) -> Vec<usize> {
        s.iter().map(|s| s.records.len()).collect()
    }

    #[test]
    fn small_gaps_one_session() {
        let r = [rec("u", 0), rec("u", 10), rec("u", 20)];
        assert_eq!(sizes(&sessionize(&r, 1800)), vec![3]);
    }

    #[test]
    fn long_gap_splits() {
        let r = [rec("u", 0), rec("u", 10), rec("u", 3610)];
        assert_eq!(sizes(&sessionize(&r, 1800)), vec![2, 1]);
    }

    #[test]
    fn users_partitioned() {
        let r = [rec("a", 0), rec("b", 5), rec("a", 10), rec("b", 15)];
        let s = sessionize(&r, 1800);
        assert_eq!(s.len(), 2);
        assert!(s.iter().all(|s| s.records.iter().all(|r| r.user_id == s.user_id)));
    }

    #[test]
    fn empty_input() {
        assert!(sessionize(&[], 1800).is_empty());
    }

    #[test]
    fn split_is_partition_and_seeded() {
        let r: Vec<_> = (0..50).map(|i| rec(&format!("u{i}"), i)).collect();
        let s = sessionize(&r, 1800);
        let (a, b, c) = split_sessions(s.clone(), 0.8, 0.1, 3);
        assert_eq!((a.len(), b.len(), c.len()), (40, 5, 5));
        let (a2, _, _) = split_sessions(s, 0.8, 0.1, 3);
        assert_eq!(a, a2);
    }

    proptest! {
        #[test]
        fn sessionize_partitions_input(
            events in proptest::collection::vec((0usize..4, 0i64..20_000), 0..60),
            timeout in 1i64..5000,
        ) {
            let recs: Vec<_> = events.iter().map(|&(u, t)| rec(&format!("u{u}"), t)).collect();
            let sessions = sessionize(&recs, timeout);
            let mut flat: Vec<(String, i64)> = sessions
                .iter()
                .flat_map(|s| s.records.iter().map(|r| (r.user_id.clone(), r.timestamp)))
                .collect();
            let mut orig: Vec<(String, i64)> =
                recs.iter().map(|r| (r.user_id.clone(), r.timestamp)).collect();
            flat.sort();
            orig.sort();
            prop_assert_eq!(flat, orig);
            for s in &sessions {
                for w in s.records.windows(2) {
                    prop_assert!(w[0].timestamp <= w[1].timestamp);
                    prop_assert!(w[1].timestamp - w[0].timestamp <= timeout);
                }
            }
        }
    }
}
