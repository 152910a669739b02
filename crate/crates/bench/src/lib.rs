//! Inputs shared by the benchmarks in `benches/`.

use std::collections::BTreeMap;

use crowdledger::Chain;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A committed chain with one story per block, each drawing `votes_per_story`
/// votes from a pool of 50 users.
pub fn chain_with_blocks(blocks: usize, votes_per_story: usize, seed: u64) -> Chain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chain = Chain::new();
    let mut step = 0;
    for story in 0..blocks as u64 {
        let poster = rng.random_range(0..50);
        chain.post_story(poster, story, step).unwrap();
        let mut deltas = BTreeMap::new();
        for _ in 0..votes_per_story {
            let voter = rng.random_range(0..50);
            if voter == poster || deltas.contains_key(&voter) {
                continue;
            }
            step += 1;
            let vote = if rng.random_bool(0.7) { 1 } else { -1 };
            chain.submit_vote(voter, story, vote, step).unwrap();
            deltas.insert(voter, if vote == 1 { 1 } else { -2 });
        }
        chain.settle_story(story, 1, &deltas, step).unwrap();
        chain.commit();
        step += 1;
    }
    chain
}

/// `n` votes of +1 or -1 with `p_up` chance of +1.
pub fn random_votes(n: usize, p_up: f64, seed: u64) -> Vec<i64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| if rng.random_bool(p_up) { 1 } else { -1 }).collect()
}
