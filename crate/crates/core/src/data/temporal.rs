//! Per-user timelines: leave-one-out split, sequence truncation, neighbor
//! item buckets and time-restricted walks.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Interaction;

/// One timestamped item consumption.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub item: u32,
    pub timestamp: i64,
}

/// Groups interactions per user, each sorted by timestamp. Ties keep input
/// order.
pub fn group_by_user(interactions: &[Interaction], n_users: usize) -> Vec<Vec<Event>> {
    let mut out = vec![Vec::new(); n_users];
    for i in interactions {
        out[i.user as usize].push(Event {
            item: i.item,
            timestamp: i.timestamp,
        });
    }
    for seq in &mut out {
        seq.sort_by_key(|e| e.timestamp);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserSplit {
    pub train: Vec<Event>,
    pub validation: Event,
    pub test: Event,
}

/// Latest event goes to test, second latest to validation, the rest to
/// train. Returns `None` when fewer than three events are available.
pub fn leave_one_out_split(sorted: &[Event]) -> Option<UserSplit> {
    let n = sorted.len();
    if n < 3 {
        return None;
    }
    Some(UserSplit {
        train: sorted[..n - 2].to_vec(),
        validation: sorted[n - 2],
        test: sorted[n - 1],
    })
}

/// Keeps the most recent `max_len` events, order preserved.
pub fn build_behavior_sequence(train: &[Event], max_len: usize) -> Vec<Event> {
    train[train.len().saturating_sub(max_len)..].to_vec()
}

/// Time-sorted stream of the items a set of users consumed.
#[derive(Clone, Debug, Default)]
pub struct ActivityStream {
    events: Vec<Event>,
}

impl ActivityStream {
    pub fn merge<'a>(sources: impl IntoIterator<Item = &'a [Event]>) -> Self {
        let mut events: Vec<Event> = sources.into_iter().flatten().copied().collect();
        events.sort_by_key(|e| e.timestamp);
        ActivityStream { events }
    }

    /// Items with timestamp in `[start, end)`, keeping the `limit` latest,
    /// in time order.
    pub fn window(&self, start: i64, end: i64, limit: usize) -> Vec<u32> {
        let lo = self.events.partition_point(|e| e.timestamp < start);
        let hi = self.events.partition_point(|e| e.timestamp < end).max(lo);
        let lo = lo.max(hi.saturating_sub(limit));
        self.events[lo..hi].iter().map(|e| e.item).collect()
    }
}

/// Neighbor-item buckets along one user's timeline.
///
/// Bucket `t` holds what the user's neighbors consumed in
/// `[timestamps[t], timestamps[t + 1])`, truncated to the `limit` most
/// recent. The result has one bucket fewer than there are timestamps.
pub fn build_neighbor_item_buckets(timestamps: &[i64], neighbors: &ActivityStream, limit: usize) -> Vec<Vec<u32>> {
    timestamps
        .windows(2)
        .map(|w| neighbors.window(w[0], w[1], limit))
        .collect()
}

/// One USER–ITEM–USER path anchored at a user's interaction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Walk {
    pub user: u32,
    pub item: u32,
    pub co_user: u32,
    pub timestamp: i64,
    pub co_timestamp: i64,
}

/// Per-item index of training interactions for walk extraction.
#[derive(Clone, Debug, Default)]
pub struct WalkIndex {
    by_item: BTreeMap<u32, Vec<(i64, u32)>>,
}

impl WalkIndex {
    pub fn from_train(train: &[(u32, Vec<Event>)]) -> Self {
        let mut by_item: BTreeMap<u32, Vec<(i64, u32)>> = BTreeMap::new();
        for (user, events) in train {
            for e in events {
                by_item.entry(e.item).or_default().push((e.timestamp, *user));
            }
        }
        for list in by_item.values_mut() {
            list.sort();
        }
        WalkIndex { by_item }
    }

    /// All walks `(user, item, u')` where `u' != user` consumed `item` within
    /// `tau` seconds of `timestamp`, one per co-user (the earliest qualifying
    /// co-interaction). When more than `cap` exist, `cap` are drawn uniformly.
    pub fn walks<R: Rng>(&self, user: u32, item: u32, timestamp: i64, tau: i64, cap: usize, rng: &mut R) -> Vec<Walk> {
        let Some(list) = self.by_item.get(&item) else {
            return Vec::new();
        };
        let lo = list.partition_point(|&(t, _)| t < timestamp.saturating_sub(tau));
        let hi = list.partition_point(|&(t, _)| t <= timestamp.saturating_add(tau));
        let mut first: BTreeMap<u32, i64> = BTreeMap::new();
        for &(t, u) in &list[lo..hi] {
            if u != user {
                first.entry(u).or_insert(t);
            }
        }
        let mut all: Vec<Walk> = first
            .into_iter()
            .map(|(co_user, co_timestamp)| Walk {
                user,
                item,
                co_user,
                timestamp,
                co_timestamp,
            })
            .collect();
        if all.len() > cap {
            let mut picked = index::sample(rng, all.len(), cap).into_vec();
            picked.sort_unstable();
            all = picked.into_iter().map(|i| all[i]).collect();
        }
        all
    }
}
