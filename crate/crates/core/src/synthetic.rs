//! Small generated datasets for tests and demos.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::InteractionDataset;
use crate::error::{Error, Result};

fn keys(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:04}")).collect()
}

/// Two user blocks, each interacting only with its own half of the items.
///
/// User `u` in block `b` always touches item `b·half + (u mod half)` first
/// (so every item appears), then `per_user − 1` further distinct items from
/// its block in random order.
pub fn planted_two_block(num_users: usize, num_items: usize, per_user: usize, seed: u64) -> Result<InteractionDataset> {
    if num_users < 2 || num_items < 2 || !num_users.is_multiple_of(2) || !num_items.is_multiple_of(2) {
        return Err(Error::Config(
            "planted dataset needs an even number (≥ 2) of users and items".into(),
        ));
    }
    let half_items = num_items / 2;
    let half_users = num_users / 2;
    if per_user < 3 || per_user > half_items {
        return Err(Error::Config(format!("per_user must lie in [3, {half_items}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let histories = (0..num_users)
        .map(|u| {
            let block = u / half_users;
            let base = (block * half_items) as u32;
            let anchor = base + (u % half_users % half_items) as u32;
            let mut rest: Vec<u32> = (base..base + half_items as u32).filter(|&i| i != anchor).collect();
            rest.shuffle(&mut rng);
            let mut h = vec![anchor];
            h.extend_from_slice(&rest[..per_user - 1]);
            h
        })
        .collect();
    InteractionDataset::from_histories(histories, num_items, keys("u", num_users), keys("i", num_items))
}

/// Uniformly random histories of length in `[min_len, max_len]`; every item
/// is used by at least one user.
pub fn random_dataset(
    num_users: usize,
    num_items: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Result<InteractionDataset> {
    if min_len < 3 || max_len < min_len || max_len > num_items || num_users * max_len < num_items {
        return Err(Error::Config("random dataset parameters are inconsistent".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut histories: Vec<Vec<u32>> = vec![Vec::new(); num_users];
    // Deal every item to some user first.
    let mut items: Vec<u32> = (0..num_items as u32).collect();
    items.shuffle(&mut rng);
    let mut next_user = 0;
    for i in items {
        while histories[next_user % num_users].len() >= max_len {
            next_user += 1;
        }
        histories[next_user % num_users].push(i);
        next_user += 1;
    }
    for h in &mut histories {
        let target = rng.random_range(min_len..=max_len).max(h.len());
        let mut pool: Vec<u32> = (0..num_items as u32).filter(|i| !h.contains(i)).collect();
        pool.shuffle(&mut rng);
        h.extend(pool.into_iter().take(target - h.len()));
        h.shuffle(&mut rng);
    }
    InteractionDataset::from_histories(histories, num_items, keys("u", num_users), keys("i", num_items))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_blocks_are_separated() {
        let ds = planted_two_block(40, 40, 8, 1).unwrap();
        assert_eq!(ds.num_users(), 40);
        assert_eq!(ds.num_items(), 40);
        for u in 0..40 {
            let block = u / 20;
            assert_eq!(ds.user_history(u).len(), 8);
            assert!(ds.user_history(u).iter().all(|&i| i as usize / 20 == block));
        }
    }

    #[test]
    fn random_dataset_is_valid() {
        for seed in 0..20 {
            let ds = random_dataset(7, 12, 3, 6, seed).unwrap();
            assert_eq!(ds.num_items(), 12);
            for u in 0..7 {
                let n = ds.user_history(u).len();
                assert!((3..=6).contains(&n));
            }
        }
    }
}
