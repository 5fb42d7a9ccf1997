//! Seeded synthetic review corpus for offline runs.
//!
//! Items fall into genres; user `u` belongs to genre `u % n_genres` and
//! walks that genre's items in a fixed cyclic order from a random offset,
//! wrapping around (so an item can be revisited). Walks are long enough that
//! each user's training prefix already contains the transitions that decide
//! the held-out items. Each genre has one review template.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ReviewRecord;

const REVIEWS: [&str; 8] = [
    "Strategic board game with clever rules and beautiful artwork.",
    "Gentle moisturizing cream that leaves skin soft and fragrant.",
    "Sturdy camping tent that stays waterproof during heavy storms.",
    "Colorful puzzle toy that keeps curious children busy for hours.",
    "Powerful kitchen blender that crushes frozen fruit into smoothies.",
    "Lightweight running shoes with springy cushioning and breathable mesh.",
    "Thrilling mystery novel with sharp dialogue and surprising twists.",
    "Compact wireless speaker with deep bass and long battery life.",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_genres: usize,
    pub items_per_genre: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 30,
            n_genres: 5,
            items_per_genre: 5,
            min_len: 9,
            max_len: 10,
            seed: 2024,
        }
    }
}

fn opaque_id(rng: &mut ChaCha8Rng, prefix: &str, len: usize) -> String {
    const ALPHABET: &[u8] = b"0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ";
    let mut s = prefix.to_string();
    for _ in 0..len {
        s.push(ALPHABET[rng.random_range(0..ALPHABET.len())] as char);
    }
    s
}

/// Records in shuffled line order. Panics if the config asks for more
/// genres than there are review templates.
pub fn generate(cfg: &SyntheticConfig) -> Vec<ReviewRecord> {
    assert!(cfg.n_genres >= 1 && cfg.n_genres <= REVIEWS.len(), "n_genres out of range");
    assert!(cfg.items_per_genre >= 1 && cfg.min_len >= 1 && cfg.min_len <= cfg.max_len);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut items: Vec<Vec<String>> = Vec::with_capacity(cfg.n_genres);
    let mut seen = std::collections::HashSet::new();
    for _ in 0..cfg.n_genres {
        let mut genre = Vec::with_capacity(cfg.items_per_genre);
        while genre.len() < cfg.items_per_genre {
            let id = opaque_id(&mut rng, "B0", 8);
            if seen.insert(id.clone()) {
                genre.push(id);
            }
        }
        items.push(genre);
    }
    let mut records = Vec::new();
    let base_ts = 1_400_000_000i64;
    for u in 0..cfg.n_users {
        let user = loop {
            let id = opaque_id(&mut rng, "A", 13);
            if seen.insert(id.clone()) {
                break id;
            }
        };
        let genre = u % cfg.n_genres;
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let start = rng.random_range(0..cfg.items_per_genre);
        let t0 = base_ts + rng.random_range(0..1_000_000);
        for step in 0..len {
            let item = &items[genre][(start + step) % cfg.items_per_genre];
            records.push(ReviewRecord {
                user: user.clone(),
                item: item.clone(),
                text: REVIEWS[genre].to_string(),
                ts: t0 + 86_400 * step as i64,
            });
        }
    }
    records.shuffle(&mut rng);
    records
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ReviewSet;

    #[test]
    fn default_corpus_shape() {
        let recs = generate(&SyntheticConfig::default());
        let rs = ReviewSet::from_records(recs.clone());
        assert_eq!(rs.n_users(), 30);
        assert!(rs.n_items() <= 25 && rs.n_items() >= 20);
        assert!(rs.users().all(|u| (9..=10).contains(&rs.user_items(u).len())));
        assert_eq!(recs, generate(&SyntheticConfig::default()));
    }

    #[test]
    fn histories_follow_the_genre_cycle() {
        let cfg = SyntheticConfig::default();
        let rs = ReviewSet::from_records(generate(&cfg));
        let mut successor = std::collections::HashMap::new();
        for u in rs.users() {
            let texts: std::collections::HashSet<_> = rs.user_history(u).map(|x| x.review_text.clone()).collect();
            assert_eq!(texts.len(), 1);
            let items = rs.user_items(u);
            for w in items.windows(2) {
                assert_ne!(w[0], w[1]);
                // One global successor per item.
                assert_eq!(*successor.entry(w[0].to_string()).or_insert(w[1].to_string()), w[1]);
            }
            // Both held-out transitions already occur in the training prefix.
            let n = items.len();
            let train = &items[..n - 2];
            for (a, b) in [(items[n - 3], items[n - 2]), (items[n - 2], items[n - 1])] {
                assert!(train.windows(2).any(|w| w[0] == a && w[1] == b));
            }
        }
    }
}
