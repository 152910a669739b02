mod common;

use std::collections::BTreeMap;

use common::random_chain;
use crowdledger::engine::{run_simulation, ScenarioConfig};
use crowdledger::ledger::{verify_blocks, verify_chain, Block, Chain, Transaction};
use proptest::prelude::*;
use sha2::{Digest, Sha256};

/// Genesis hash computed from the documented layout with no help from the
/// ledger module: index 0, 32 zero bytes, zero transactions.
#[test]
fn genesis_hash_matches_layout() {
    let mut payload = Vec::new();
    payload.extend_from_slice(&0u64.to_le_bytes());
    payload.extend_from_slice(&[0u8; 32]);
    payload.extend_from_slice(&0u64.to_le_bytes());
    let expected: [u8; 32] = Sha256::digest(&payload).into();
    let genesis = Block::genesis();
    assert_eq!(genesis.hash, expected);
    assert_eq!(genesis.prev_hash, [0u8; 32]);
    assert!(genesis.txs.is_empty());
}

#[test]
fn transaction_encoding_matches_layout() {
    let tx = Transaction::settlement(3, 9, -1, -2, 17);
    let mut payload = Vec::new();
    payload.extend_from_slice(&5u64.to_le_bytes());
    payload.extend_from_slice(&[7u8; 32]);
    payload.extend_from_slice(&1u64.to_le_bytes());
    payload.push(2);
    for word in
        [3u64.to_le_bytes(), 9u64.to_le_bytes(), (-1i64).to_le_bytes(), 17u64.to_le_bytes(), (-2i64).to_le_bytes()]
    {
        payload.extend_from_slice(&word);
    }
    assert_eq!(Block::canonical_bytes(5, &[7u8; 32], &[tx]), payload);
    let expected: [u8; 32] = Sha256::digest(&payload).into();
    assert_eq!(Block::compute_hash(5, &[7u8; 32], &[tx]), expected);
}

#[test]
fn random_chain_verifies_and_roundtrips() {
    let chain = random_chain(50, 1);
    assert_eq!(chain.len(), 50);
    assert!(verify_chain(&chain));
    let mut buf = Vec::new();
    chain.export_jsonl(&mut buf).unwrap();
    let back = Chain::import_jsonl(buf.as_slice()).unwrap();
    assert!(verify_chain(&back));
    assert_eq!(back.blocks(), chain.blocks());
    assert_eq!(back.accounts(), chain.accounts());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn any_single_byte_mutation_is_detected(block_pick in any::<u64>(), byte_pick in any::<u64>(), mask in 1u8..=255) {
        let chain = random_chain(50, 7);
        let mut blocks = chain.blocks().to_vec();
        let b = (block_pick % blocks.len() as u64) as usize;
        let mut bytes = blocks[b].to_bytes();
        let i = (byte_pick % bytes.len() as u64) as usize;
        bytes[i] ^= mask;
        match Block::from_bytes(&bytes) {
            Err(_) => {}
            Ok(tampered) => {
                blocks[b] = tampered;
                prop_assert!(!verify_blocks(&blocks));
            }
        }
    }

    #[test]
    fn replay_equals_live_accounts(seed in any::<u64>(), blocks in 2usize..30) {
        let chain = random_chain(blocks, seed);
        prop_assert_eq!(&chain.replay_reputations(), chain.accounts());
        let rebuilt = Chain::from_blocks(chain.blocks().to_vec()).unwrap();
        prop_assert_eq!(rebuilt.accounts(), chain.accounts());
    }
}

/// Reputations on the chain equal the sum of the settlement reward deltas the
/// engine reported, and replay from the chain alone reproduces them.
#[test]
fn simulated_chain_replays_exactly() {
    for seed in [1, 2, 3] {
        let sim = run_simulation(&ScenarioConfig::new(100, 200, 1000, seed), None).unwrap();
        assert!(verify_chain(&sim.chain));
        let mut from_settlements: BTreeMap<u64, i64> = BTreeMap::new();
        for s in &sim.settlements {
            for (&u, &d) in &s.reward_deltas {
                *from_settlements.entry(u).or_insert(0) += d;
            }
        }
        let replay = sim.chain.replay_reputations();
        for user in 0..100u64 {
            let expected = from_settlements.get(&user).copied().unwrap_or(0);
            assert_eq!(sim.chain.reputation(user), expected, "user {user}");
            assert_eq!(replay.get(&user).copied().unwrap_or(0), expected, "user {user}");
        }
    }
}
