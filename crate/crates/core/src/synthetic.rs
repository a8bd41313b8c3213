//! Generated corpora with known structure, written in the same tab-separated
//! format the loaders read.

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Cursor};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{parse_interactions, parse_social_edges, preprocess, DataError, PrepareConfig, PreparedDataset};
use crate::exec::Execution;
use crate::rng;

const HOUR: i64 = 3_600;
const DAY: i64 = 86_400;
/// Start of the generated timelines (2019-01-01).
const EPOCH: i64 = 1_546_300_800;

/// Interaction and social rows as tab-separated text.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SyntheticCorpus {
    pub interactions: String,
    pub social: String,
}

impl SyntheticCorpus {
    fn event(&mut self, user: usize, item: usize, ts: i64) {
        writeln!(self.interactions, "u{user}\ti{item}\t{ts}").unwrap();
    }

    fn edge(&mut self, a: usize, b: usize) {
        writeln!(self.social, "u{a}\tu{b}").unwrap();
    }

    /// Writes `interactions.tsv` and `social.tsv` into `dir`.
    pub fn write(&self, dir: &Path) -> io::Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir)?;
        let i = dir.join("interactions.tsv");
        let s = dir.join("social.tsv");
        fs::write(&i, &self.interactions)?;
        fs::write(&s, &self.social)?;
        Ok((i, s))
    }

    /// Runs the full preparation pipeline on the in-memory rows.
    pub fn prepare(&self, config: PrepareConfig, exec: Execution) -> Result<PreparedDataset, DataError> {
        let raw = parse_interactions(Cursor::new(self.interactions.as_bytes()))?;
        let log = preprocess(&raw, config.min_actions, config.rating_threshold)?;
        let (social, _) = parse_social_edges(Cursor::new(self.social.as_bytes()), &log.users)?;
        PreparedDataset::build(&log, social, config, exec)
    }

    /// Same corpus without any social rows.
    pub fn without_social(&self) -> Self {
        SyntheticCorpus {
            interactions: self.interactions.clone(),
            social: String::new(),
        }
    }
}

/// Users step through items `start, start+1, …` modulo `n_items`, one per
/// day. Users come in friend pairs; the second of each pair repeats the
/// first one's items 12 hours later.
pub fn cyclic_corpus(n_users: usize, n_items: usize, events_per_user: usize, seed: u64) -> SyntheticCorpus {
    let mut r = rng::stream(seed, &[0x5c]);
    let mut c = SyntheticCorpus::default();
    for pair in 0..n_users.div_ceil(2) {
        let start = r.gen_range(0..n_items);
        let t0 = EPOCH + r.gen_range(0..30) * DAY + r.gen_range(0..12) * HOUR;
        let (a, b) = (2 * pair, 2 * pair + 1);
        for t in 0..events_per_user {
            let item = (start + t) % n_items;
            let ts = t0 + t as i64 * DAY;
            c.event(a, item, ts);
            if b < n_users {
                c.event(b, item, ts + 12 * HOUR);
            }
        }
        if b < n_users {
            c.edge(a, b);
        }
    }
    c
}

/// Groups of `group_size` users: a leader consumes uniformly random items
/// once a day and every other member repeats each of them 12 hours later.
/// Only leader–member edges exist, so a member's next item is its leader's
/// most recent one and its own history carries no signal.
pub fn neighbor_driven_corpus(
    n_groups: usize,
    group_size: usize,
    n_items: usize,
    events_per_user: usize,
    seed: u64,
) -> SyntheticCorpus {
    let mut r = rng::stream(seed, &[0x4e]);
    let mut c = SyntheticCorpus::default();
    let items: Vec<usize> = (0..n_items).collect();
    for g in 0..n_groups {
        let leader = g * group_size;
        let t0 = EPOCH + r.gen_range(0..30) * DAY + r.gen_range(0..12) * HOUR;
        for t in 0..events_per_user {
            let item = *items.choose(&mut r).expect("nonempty catalog");
            let ts = t0 + t as i64 * DAY;
            c.event(leader, item, ts);
            for m in 1..group_size {
                c.event(leader + m, item, ts + 12 * HOUR);
            }
        }
        for m in 1..group_size {
            c.edge(leader, leader + m);
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prep(c: &SyntheticCorpus) -> PreparedDataset {
        c.prepare(PrepareConfig::default(), Execution::Sequential).unwrap()
    }

    #[test]
    fn cyclic_corpus_follows_the_cycle() {
        let c = cyclic_corpus(20, 10, 12, 1);
        let ds = prep(&c);
        assert_eq!(ds.n_users, 20);
        assert_eq!(ds.n_items, 10);
        assert_eq!(ds.social.n_edges(), 10);
        for tl in &ds.users {
            for w in tl.items.windows(2) {
                let (a, b) = (ds.item_ids.decode(w[0]), ds.item_ids.decode(w[1]));
                let (a, b): (usize, usize) = (a[1..].parse().unwrap(), b[1..].parse().unwrap());
                assert_eq!(b, (a + 1) % 10);
            }
        }
        assert_eq!(c, cyclic_corpus(20, 10, 12, 1));
    }

    #[test]
    fn members_see_the_leader_item_before_their_target() {
        let c = neighbor_driven_corpus(5, 4, 30, 12, 2);
        let ds = prep(&c);
        for u in 0..ds.n_users as u32 {
            if ds.user_ids.decode(u)[1..].parse::<usize>().unwrap() % 4 == 0 {
                continue;
            }
            let tl = &ds.users[u as usize];
            let p = tl.items.len() - 1;
            assert!(tl.buckets[p - 1].contains(&tl.items[p]));
        }
        assert!(prep(&c.without_social()).users.iter().all(|tl| tl.buckets.iter().all(Vec::is_empty)));
    }
}
