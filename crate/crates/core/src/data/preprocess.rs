use super::{DataError, IdMap, Interaction, InteractionLog};

/// Binarizes ratings and applies the k-core activity filter.
///
/// Interactions carrying a rating `<= rating_threshold` are dropped first.
/// Users and items with fewer than `min_actions` surviving interactions are
/// then removed repeatedly until both constraints hold at once. Surviving
/// ids are re-compacted in order of first appearance.
pub fn preprocess(log: &InteractionLog, min_actions: usize, rating_threshold: f64) -> Result<InteractionLog, DataError> {
    let mut kept: Vec<&Interaction> = log
        .interactions
        .iter()
        .filter(|i| i.rating.is_none_or(|r| r > rating_threshold))
        .collect();

    loop {
        let mut user_counts = vec![0usize; log.users.len()];
        let mut item_counts = vec![0usize; log.items.len()];
        for i in &kept {
            user_counts[i.user as usize] += 1;
            item_counts[i.item as usize] += 1;
        }
        let before = kept.len();
        kept.retain(|i| user_counts[i.user as usize] >= min_actions && item_counts[i.item as usize] >= min_actions);
        if kept.len() == before {
            break;
        }
    }

    if kept.is_empty() {
        return Err(DataError::EmptyAfterFilter);
    }

    let mut out = InteractionLog {
        interactions: Vec::with_capacity(kept.len()),
        users: IdMap::default(),
        items: IdMap::default(),
    };
    for i in kept {
        let user = out.users.get_or_insert(log.users.decode(i.user));
        let item = out.items.get_or_insert(log.items.decode(i.item));
        out.interactions.push(Interaction { user, item, ..*i });
    }
    Ok(out)
}
