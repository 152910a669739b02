//! Append-only hash-chained transaction log.
//!
//! The chain records story posts, votes and settlements. Every block commits
//! to its predecessor through `prev_hash`, and its own `hash` is SHA-256 over
//! a canonical binary serialization (see [`Block::canonical_bytes`]), so any
//! mutation of a sealed block is detectable by [`verify_chain`].
//!
//! State (accounts and story records) is derived from the transactions and can
//! always be rebuilt with [`Chain::from_blocks`].

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type UserId = u64;
pub type StoryId = u64;
pub type Digest32 = [u8; 32];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error("cannot append an empty transaction batch")]
    EmptyBatch,
    #[error("transaction {index} is invalid: {reason}")]
    InvalidTransaction { index: usize, reason: Box<LedgerError> },
    #[error("user {user} cannot vote on their own story {story}")]
    SelfVote { user: UserId, story: StoryId },
    #[error("user {user} already voted on story {story}")]
    DuplicateVote { user: UserId, story: StoryId },
    #[error("story {0} is already settled")]
    StorySettled(StoryId),
    #[error("story {0} is already settled")]
    AlreadySettled(StoryId),
    #[error("unknown story {0}")]
    UnknownStory(StoryId),
    #[error("story {0} already exists")]
    DuplicateStory(StoryId),
    #[error("vote value must be -1 or +1, got {0}")]
    BadVoteValue(i64),
    #[error("step {step} precedes the last recorded step {last}")]
    StepRegression { step: u64, last: u64 },
    #[error("user {user} already received a settlement for story {story}")]
    DuplicateSettlement { user: UserId, story: StoryId },
    #[error("settlement label {got} disagrees with recorded consensus {expected}")]
    LabelMismatch { expected: i64, got: i64 },
    #[error("malformed block encoding: {0}")]
    Decode(String),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TxKind {
    Post,
    Vote,
    Settlement,
}

impl TxKind {
    fn tag(self) -> u8 {
        match self {
            TxKind::Post => 0,
            TxKind::Vote => 1,
            TxKind::Settlement => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(TxKind::Post),
            1 => Some(TxKind::Vote),
            2 => Some(TxKind::Settlement),
            _ => None,
        }
    }
}

/// One ledger event.
///
/// `vote_value` is `+1` for posts (the poster asserts truth), the cast vote for
/// votes, and the consensus label for settlements. `amount` is the reputation
/// delta a settlement grants to `user_id`; it is zero for posts and votes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub kind: TxKind,
    pub user_id: UserId,
    pub story_id: StoryId,
    pub vote_value: i64,
    pub step: u64,
    #[serde(default)]
    pub amount: i64,
}

impl Transaction {
    pub fn post(user_id: UserId, story_id: StoryId, step: u64) -> Self {
        Transaction { kind: TxKind::Post, user_id, story_id, vote_value: 1, step, amount: 0 }
    }

    pub fn vote(user_id: UserId, story_id: StoryId, vote_value: i64, step: u64) -> Self {
        Transaction { kind: TxKind::Vote, user_id, story_id, vote_value, step, amount: 0 }
    }

    pub fn settlement(user_id: UserId, story_id: StoryId, label: i64, amount: i64, step: u64) -> Self {
        Transaction { kind: TxKind::Settlement, user_id, story_id, vote_value: label, step, amount }
    }

    pub const ENCODED_LEN: usize = 1 + 8 * 5;

    fn encode_into(&self, out: &mut Vec<u8>) {
        out.push(self.kind.tag());
        out.extend_from_slice(&self.user_id.to_le_bytes());
        out.extend_from_slice(&self.story_id.to_le_bytes());
        out.extend_from_slice(&self.vote_value.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.amount.to_le_bytes());
    }

    fn decode(bytes: &[u8]) -> Result<Self, LedgerError> {
        if bytes.len() != Self::ENCODED_LEN {
            return Err(LedgerError::Decode("truncated transaction".into()));
        }
        let kind = TxKind::from_tag(bytes[0])
            .ok_or_else(|| LedgerError::Decode(format!("unknown transaction kind {}", bytes[0])))?;
        let word = |i: usize| -> [u8; 8] { bytes[1 + 8 * i..9 + 8 * i].try_into().unwrap() };
        Ok(Transaction {
            kind,
            user_id: u64::from_le_bytes(word(0)),
            story_id: u64::from_le_bytes(word(1)),
            vote_value: i64::from_le_bytes(word(2)),
            step: u64::from_le_bytes(word(3)),
            amount: i64::from_le_bytes(word(4)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub index: u64,
    pub prev_hash: Digest32,
    pub txs: Vec<Transaction>,
    pub hash: Digest32,
}

impl Block {
    /// Canonical payload that is hashed:
    /// `index (u64 LE) ‖ prev_hash (32 bytes) ‖ tx_count (u64 LE) ‖ tx*`,
    /// where each tx is `kind (u8) ‖ user_id ‖ story_id ‖ vote_value ‖ step ‖ amount`
    /// with every integer encoded as 8 little-endian bytes.
    pub fn canonical_bytes(index: u64, prev_hash: &Digest32, txs: &[Transaction]) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + txs.len() * Transaction::ENCODED_LEN);
        out.extend_from_slice(&index.to_le_bytes());
        out.extend_from_slice(prev_hash);
        out.extend_from_slice(&(txs.len() as u64).to_le_bytes());
        for tx in txs {
            tx.encode_into(&mut out);
        }
        out
    }

    pub fn compute_hash(index: u64, prev_hash: &Digest32, txs: &[Transaction]) -> Digest32 {
        Sha256::digest(Self::canonical_bytes(index, prev_hash, txs)).into()
    }

    fn seal(index: u64, prev_hash: Digest32, txs: Vec<Transaction>) -> Self {
        let hash = Self::compute_hash(index, &prev_hash, &txs);
        Block { index, prev_hash, txs, hash }
    }

    pub fn genesis() -> Self {
        Self::seal(0, [0u8; 32], Vec::new())
    }

    /// Full storage encoding: the canonical payload followed by the stored hash.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Self::canonical_bytes(self.index, &self.prev_hash, &self.txs);
        out.extend_from_slice(&self.hash);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LedgerError> {
        if bytes.len() < 8 + 32 + 8 + 32 {
            return Err(LedgerError::Decode("block too short".into()));
        }
        let index = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
        let prev_hash: Digest32 = bytes[8..40].try_into().unwrap();
        let count = u64::from_le_bytes(bytes[40..48].try_into().unwrap());
        let body = &bytes[48..];
        let expected = (count as u128) * Transaction::ENCODED_LEN as u128 + 32;
        if body.len() as u128 != expected {
            return Err(LedgerError::Decode(format!(
                "length mismatch: {count} transactions need {expected} bytes, found {}",
                body.len()
            )));
        }
        let (tx_bytes, hash_bytes) = body.split_at(body.len() - 32);
        let txs =
            tx_bytes.chunks_exact(Transaction::ENCODED_LEN).map(Transaction::decode).collect::<Result<Vec<_>, _>>()?;
        Ok(Block { index, prev_hash, txs, hash: hash_bytes.try_into().unwrap() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoryStatus {
    Open,
    Settled,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoryRecord {
    pub story_id: StoryId,
    pub poster_id: UserId,
    pub status: StoryStatus,
    pub consensus_label: Option<i64>,
    /// `(user, vote_value, step)` in arrival order.
    pub votes: Vec<(UserId, i64, u64)>,
    voters: BTreeSet<UserId>,
    rewarded: BTreeSet<UserId>,
}

impl StoryRecord {
    fn new(story_id: StoryId, poster_id: UserId) -> Self {
        StoryRecord {
            story_id,
            poster_id,
            status: StoryStatus::Open,
            consensus_label: None,
            votes: Vec::new(),
            voters: BTreeSet::new(),
            rewarded: BTreeSet::new(),
        }
    }

    pub fn has_voted(&self, user: UserId) -> bool {
        self.voters.contains(&user)
    }

    pub fn vote_values(&self) -> Vec<i64> {
        self.votes.iter().map(|&(_, v, _)| v).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct LedgerState {
    accounts: BTreeMap<UserId, i64>,
    stories: BTreeMap<StoryId, StoryRecord>,
    last_step: Option<u64>,
}

impl LedgerState {
    fn check(&self, tx: &Transaction) -> Result<(), LedgerError> {
        if tx.vote_value != 1 && tx.vote_value != -1 {
            return Err(LedgerError::BadVoteValue(tx.vote_value));
        }
        if let Some(last) = self.last_step {
            if tx.step < last {
                return Err(LedgerError::StepRegression { step: tx.step, last });
            }
        }
        match tx.kind {
            TxKind::Post => {
                if self.stories.contains_key(&tx.story_id) {
                    return Err(LedgerError::DuplicateStory(tx.story_id));
                }
                if tx.vote_value != 1 {
                    return Err(LedgerError::BadVoteValue(tx.vote_value));
                }
            }
            TxKind::Vote => {
                let story = self.stories.get(&tx.story_id).ok_or(LedgerError::UnknownStory(tx.story_id))?;
                if story.status == StoryStatus::Settled {
                    return Err(LedgerError::StorySettled(tx.story_id));
                }
                if story.poster_id == tx.user_id {
                    return Err(LedgerError::SelfVote { user: tx.user_id, story: tx.story_id });
                }
                if story.has_voted(tx.user_id) {
                    return Err(LedgerError::DuplicateVote { user: tx.user_id, story: tx.story_id });
                }
            }
            TxKind::Settlement => {
                let story = self.stories.get(&tx.story_id).ok_or(LedgerError::UnknownStory(tx.story_id))?;
                if let Some(label) = story.consensus_label {
                    if label != tx.vote_value {
                        return Err(LedgerError::LabelMismatch { expected: label, got: tx.vote_value });
                    }
                }
                if story.rewarded.contains(&tx.user_id) {
                    return Err(LedgerError::DuplicateSettlement { user: tx.user_id, story: tx.story_id });
                }
            }
        }
        Ok(())
    }

    fn apply(&mut self, tx: &Transaction) -> Result<(), LedgerError> {
        self.check(tx)?;
        self.last_step = Some(tx.step);
        match tx.kind {
            TxKind::Post => {
                self.accounts.entry(tx.user_id).or_insert(0);
                self.stories.insert(tx.story_id, StoryRecord::new(tx.story_id, tx.user_id));
            }
            TxKind::Vote => {
                self.accounts.entry(tx.user_id).or_insert(0);
                let story = self.stories.get_mut(&tx.story_id).expect("checked");
                story.votes.push((tx.user_id, tx.vote_value, tx.step));
                story.voters.insert(tx.user_id);
            }
            TxKind::Settlement => {
                let story = self.stories.get_mut(&tx.story_id).expect("checked");
                story.status = StoryStatus::Settled;
                story.consensus_label = Some(tx.vote_value);
                story.rewarded.insert(tx.user_id);
                *self.accounts.entry(tx.user_id).or_insert(0) += tx.amount;
            }
        }
        Ok(())
    }
}

/// The ledger: sealed blocks, transactions awaiting a block, and derived state.
#[derive(Debug, Clone)]
pub struct Chain {
    blocks: Vec<Block>,
    pending: Vec<Transaction>,
    state: LedgerState,
}

impl Default for Chain {
    fn default() -> Self {
        Self::new()
    }
}

impl Chain {
    pub fn new() -> Self {
        Chain { blocks: vec![Block::genesis()], pending: Vec::new(), state: LedgerState::default() }
    }

    /// Rebuilds a chain (and its state) by replaying the given blocks. Hashes
    /// are not checked here; use [`verify_chain`] for that.
    pub fn from_blocks(blocks: Vec<Block>) -> Result<Self, LedgerError> {
        let mut state = LedgerState::default();
        for block in &blocks {
            for (index, tx) in block.txs.iter().enumerate() {
                state.apply(tx).map_err(|e| LedgerError::InvalidTransaction { index, reason: Box::new(e) })?;
            }
        }
        Ok(Chain { blocks, pending: Vec::new(), state })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn head_hash(&self) -> Digest32 {
        self.blocks.last().map(|b| b.hash).unwrap_or([0u8; 32])
    }

    pub fn pending(&self) -> &[Transaction] {
        &self.pending
    }

    pub fn accounts(&self) -> &BTreeMap<UserId, i64> {
        &self.state.accounts
    }

    pub fn reputation(&self, user: UserId) -> i64 {
        self.state.accounts.get(&user).copied().unwrap_or(0)
    }

    pub fn stories(&self) -> &BTreeMap<StoryId, StoryRecord> {
        &self.state.stories
    }

    pub fn story(&self, id: StoryId) -> Option<&StoryRecord> {
        self.state.stories.get(&id)
    }

    /// Validates `txs` in order against the current state, applies them and
    /// seals them into a new block. Any pending transactions are sealed first.
    pub fn append_block(&mut self, txs: Vec<Transaction>) -> Result<&Block, LedgerError> {
        if txs.is_empty() {
            return Err(LedgerError::EmptyBatch);
        }
        let mut scratch = self.state.clone();
        for (index, tx) in txs.iter().enumerate() {
            scratch.apply(tx).map_err(|e| LedgerError::InvalidTransaction { index, reason: Box::new(e) })?;
        }
        self.commit();
        self.state = scratch;
        self.push_block(txs);
        Ok(self.blocks.last().expect("non-empty"))
    }

    fn push_block(&mut self, txs: Vec<Transaction>) {
        let prev = self.blocks.last().expect("genesis always present");
        let block = Block::seal(prev.index + 1, prev.hash, txs);
        self.blocks.push(block);
    }

    /// Seals all pending transactions into a block. Returns `None` when
    /// nothing is pending.
    pub fn commit(&mut self) -> Option<&Block> {
        if self.pending.is_empty() {
            return None;
        }
        let txs = std::mem::take(&mut self.pending);
        self.push_block(txs);
        self.blocks.last()
    }

    fn submit(&mut self, tx: Transaction) -> Result<Transaction, LedgerError> {
        self.state.apply(&tx)?;
        self.pending.push(tx);
        Ok(tx)
    }

    pub fn post_story(&mut self, user: UserId, story: StoryId, step: u64) -> Result<Transaction, LedgerError> {
        self.submit(Transaction::post(user, story, step))
    }

    pub fn submit_vote(
        &mut self,
        user: UserId,
        story: StoryId,
        value: i64,
        step: u64,
    ) -> Result<Transaction, LedgerError> {
        if value != 1 && value != -1 {
            return Err(LedgerError::BadVoteValue(value));
        }
        self.submit(Transaction::vote(user, story, value, step))
    }

    /// Closes a story with `label` and books `reward_deltas`. One settlement
    /// transaction is emitted per rewarded user (ascending user id); the
    /// poster always receives one, even with a zero delta.
    pub fn settle_story(
        &mut self,
        story: StoryId,
        label: i64,
        reward_deltas: &BTreeMap<UserId, i64>,
        step: u64,
    ) -> Result<Vec<Transaction>, LedgerError> {
        let record = self.state.stories.get(&story).ok_or(LedgerError::UnknownStory(story))?;
        if record.status == StoryStatus::Settled {
            return Err(LedgerError::AlreadySettled(story));
        }
        if label != 1 && label != -1 {
            return Err(LedgerError::BadVoteValue(label));
        }
        let mut deltas = reward_deltas.clone();
        deltas.entry(record.poster_id).or_insert(0);
        let txs: Vec<Transaction> = deltas
            .into_iter()
            .map(|(user, amount)| Transaction::settlement(user, story, label, amount, step))
            .collect();
        let mut scratch = self.state.clone();
        for tx in &txs {
            scratch.apply(tx)?;
        }
        self.state = scratch;
        self.pending.extend_from_slice(&txs);
        Ok(txs)
    }

    /// Rebuilds reputations from settlement transactions alone (sealed and pending).
    pub fn replay_reputations(&self) -> BTreeMap<UserId, i64> {
        let mut accounts: BTreeMap<UserId, i64> = BTreeMap::new();
        let all = self.blocks.iter().flat_map(|b| b.txs.iter()).chain(self.pending.iter());
        for tx in all {
            let entry = accounts.entry(tx.user_id).or_insert(0);
            if tx.kind == TxKind::Settlement {
                *entry += tx.amount;
            }
        }
        accounts
    }

    pub fn export_jsonl<W: Write>(&self, mut out: W) -> Result<(), LedgerError> {
        for block in &self.blocks {
            let line = serde_json::to_string(&BlockJson::from(block)).map_err(|e| LedgerError::Io(e.to_string()))?;
            writeln!(out, "{line}").map_err(|e| LedgerError::Io(e.to_string()))?;
        }
        Ok(())
    }

    /// Reads blocks written by [`Chain::export_jsonl`] and replays them.
    pub fn import_jsonl<R: BufRead>(input: R) -> Result<Self, LedgerError> {
        let mut blocks = Vec::new();
        for line in input.lines() {
            let line = line.map_err(|e| LedgerError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let json: BlockJson = serde_json::from_str(&line).map_err(|e| LedgerError::Decode(e.to_string()))?;
            blocks.push(json.try_into()?);
        }
        Self::from_blocks(blocks)
    }
}

/// True iff every block's stored hash matches its recomputed hash, block 0 is
/// the fixed genesis block, and every `prev_hash` links to its predecessor.
pub fn verify_chain(chain: &Chain) -> bool {
    verify_blocks(chain.blocks())
}

pub fn verify_blocks(blocks: &[Block]) -> bool {
    let Some(first) = blocks.first() else {
        return false;
    };
    if *first != Block::genesis() {
        return false;
    }
    blocks.iter().enumerate().all(|(i, block)| {
        block.index == i as u64
            && Block::compute_hash(block.index, &block.prev_hash, &block.txs) == block.hash
            && (i == 0 || block.prev_hash == blocks[i - 1].hash)
    })
}

#[derive(Serialize, Deserialize)]
struct BlockJson {
    index: u64,
    prev_hash: String,
    hash: String,
    txs: Vec<Transaction>,
}

impl From<&Block> for BlockJson {
    fn from(b: &Block) -> Self {
        BlockJson { index: b.index, prev_hash: hex::encode(b.prev_hash), hash: hex::encode(b.hash), txs: b.txs.clone() }
    }
}

impl TryFrom<BlockJson> for Block {
    type Error = LedgerError;

    fn try_from(j: BlockJson) -> Result<Self, LedgerError> {
        let digest = |s: &str| -> Result<Digest32, LedgerError> {
            let bytes = hex::decode(s).map_err(|e| LedgerError::Decode(e.to_string()))?;
            bytes.try_into().map_err(|_| LedgerError::Decode("digest must be 32 bytes".into()))
        };
        Ok(Block { index: j.index, prev_hash: digest(&j.prev_hash)?, hash: digest(&j.hash)?, txs: j.txs })
    }
}
