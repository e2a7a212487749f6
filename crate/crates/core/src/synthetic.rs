//! Planted three-class corpus with disjoint character inventories, used to
//! check that the whole pipeline can learn an easy signal.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{DatasetSplit, LabelSet, NameRecord};

pub const INVENTORIES: [&[char]; 3] = [&['a', 'b', 'c', 'd'], &['e', 'f', 'g', 'h'], &['i', 'j', 'k', 'l']];
pub const MIN_LEN: usize = 4;
pub const MAX_LEN: usize = 8;
pub const N_TRAIN: usize = 3000;
pub const N_TEST: usize = 600;
pub const SEED: u64 = 42;

pub fn label_set() -> LabelSet {
    LabelSet::custom("synthetic3", &["class_a", "class_b", "class_c"]).expect("three distinct labels")
}

fn word<R: Rng>(chars: &[char], rng: &mut R) -> String {
    let len = rng.random_range(MIN_LEN..=MAX_LEN);
    (0..len).map(|_| *chars.choose(rng).expect("nonempty inventory")).collect()
}

/// `n` records with uniformly drawn classes; first and last names both come
/// from the class inventory.
pub fn generate(n: usize, rng: &mut ChaCha8Rng) -> Vec<NameRecord> {
    (0..n)
        .map(|_| {
            let class = rng.random_range(0..INVENTORIES.len());
            let chars = INVENTORIES[class];
            let first = word(chars, rng);
            let last = word(chars, rng);
            NameRecord::new(&first, &last, class).expect("generated names are nonblank")
        })
        .collect()
}

/// Train and test sides drawn from one seeded stream, train first.
pub fn synthetic_split(n_train: usize, n_test: usize, seed: u64) -> DatasetSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = generate(n_train, &mut rng);
    let test = generate(n_test, &mut rng);
    DatasetSplit {
        train,
        test,
        seed,
        test_fraction: n_test as f64 / (n_train + n_test) as f64,
    }
}

pub fn default_split() -> DatasetSplit {
    synthetic_split(N_TRAIN, N_TEST, SEED)
}
