//! Ideal service layer: authenticated send, signatures, broadcast, channel
//! leakage and round synchronisation.
//!
//! Adversarial choices (message substitution, verification bits for unknown
//! tokens, registration approval) enter through small policy hooks; the
//! defaults approve registrations, never substitute and reject unknown tokens.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::SigToken;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ServiceError {
    #[error("sender {0} has no registered key")]
    UnregisteredSender(usize),
    #[error("signer {0} is unknown to the signature service")]
    SignerUnknown(usize),
    #[error("signature already recorded as invalid for this message")]
    SignatureConflict,
    #[error("registration of party {0} was rejected")]
    RegistrationRejected(usize),
}

/// Public-key directory behind authenticated sends.
#[derive(Clone, Debug, Default)]
pub struct KeyRegistry {
    keys: BTreeMap<usize, u64>,
}

impl KeyRegistry {
    /// Registers `party`'s key if `approve` agrees (the adversary's say).
    pub fn register(&mut self, party: usize, key: u64, approve: impl FnOnce(usize, u64) -> bool) -> Result<(), ServiceError> {
        if !approve(party, key) {
            return Err(ServiceError::RegistrationRejected(party));
        }
        self.keys.insert(party, key);
        Ok(())
    }

    pub fn lookup(&self, party: usize) -> Option<u64> {
        self.keys.get(&party).copied()
    }

    pub fn delete(&mut self, party: usize) -> bool {
        self.keys.remove(&party).is_some()
    }
}

/// A message handed to its receiver together with the authenticated sender.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuthDelivery<M> {
    pub from: usize,
    pub to: usize,
    pub msg: M,
}

/// Authenticated point-to-point channel.
#[derive(Clone, Debug, Default)]
pub struct AuthService {
    pub registry: KeyRegistry,
    corrupted: BTreeSet<usize>,
}

impl AuthService {
    pub fn corrupt(&mut self, party: usize) {
        self.corrupted.insert(party);
    }

    pub fn is_corrupted(&self, party: usize) -> bool {
        self.corrupted.contains(&party)
    }

    /// Delivers `msg` from `sender` to `receiver`. Only a corrupted sender's
    /// traffic may be rewritten by `substitute`, which can replace both the
    /// message and the receiver.
    pub fn auth_send<M: Clone>(
        &self,
        sender: usize,
        receiver: usize,
        msg: M,
        substitute: impl FnOnce(&M, usize) -> Option<(M, usize)>,
    ) -> Result<AuthDelivery<M>, ServiceError> {
        if self.registry.lookup(sender).is_none() {
            return Err(ServiceError::UnregisteredSender(sender));
        }
        if self.is_corrupted(sender) {
            if let Some((m, r)) = substitute(&msg, receiver) {
                return Ok(AuthDelivery { from: sender, to: r, msg: m });
            }
        }
        Ok(AuthDelivery {
            from: sender,
            to: receiver,
            msg,
        })
    }
}

#[derive(Clone, Debug, Default)]
struct SignerState {
    key: u64,
    records: BTreeMap<(Vec<u8>, SigToken), bool>,
    /// Messages with at least one valid record.
    signed: BTreeSet<Vec<u8>>,
}

/// Signature functionality with per-signer record tables.
#[derive(Clone, Debug, Default)]
pub struct SigService {
    signers: BTreeMap<usize, SignerState>,
    corrupted: BTreeSet<usize>,
    next_token: u64,
}

impl SigService {
    pub fn keygen(&mut self, signer: usize, key: u64) {
        self.signers.entry(signer).or_default().key = key;
    }

    pub fn key_of(&self, signer: usize) -> Option<u64> {
        self.signers.get(&signer).map(|s| s.key)
    }

    pub fn corrupt(&mut self, signer: usize) {
        self.corrupted.insert(signer);
    }

    /// Signs `msg` with a fresh token and records it as valid.
    pub fn sig_sign(&mut self, signer: usize, msg: &[u8]) -> Result<SigToken, ServiceError> {
        self.next_token += 1;
        let token = SigToken(self.next_token);
        let st = self
            .signers
            .get_mut(&signer)
            .ok_or(ServiceError::SignerUnknown(signer))?;
        let rec = (msg.to_vec(), token);
        if st.records.get(&rec) == Some(&false) {
            return Err(ServiceError::SignatureConflict);
        }
        st.records.insert(rec, true);
        st.signed.insert(msg.to_vec());
        Ok(token)
    }

    /// Verification, rules applied in order:
    /// 1. matching key and a valid record → valid;
    /// 2. matching key, honest signer, message never signed → invalid;
    /// 3. an existing record for (msg, token) → its bit;
    /// 4. otherwise the adversary's bit `phi`, which is recorded.
    pub fn sig_verify(
        &mut self,
        signer: usize,
        msg: &[u8],
        token: SigToken,
        key: u64,
        phi: impl FnOnce() -> bool,
    ) -> bool {
        let corrupted = self.corrupted.contains(&signer);
        let Some(st) = self.signers.get_mut(&signer) else {
            return false;
        };
        let rec = (msg.to_vec(), token);
        let bit = st.records.get(&rec).copied();
        if key == st.key && bit == Some(true) {
            return true;
        }
        if key == st.key && !corrupted && !st.signed.contains(msg) {
            return false;
        }
        if let Some(b) = bit {
            return b;
        }
        let b = phi();
        st.records.insert(rec, b);
        if b {
            st.signed.insert(msg.to_vec());
        }
        b
    }
}

/// Output of one broadcast: a delivery per member plus the adversary's copy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Broadcast<M> {
    pub deliveries: Vec<AuthDelivery<M>>,
    pub observed: (usize, M),
}

pub fn bc_broadcast<M: Clone>(sender: usize, msg: M, members: &[usize]) -> Broadcast<M> {
    Broadcast {
        deliveries: members
            .iter()
            .map(|&to| AuthDelivery {
                from: sender,
                to,
                msg: msg.clone(),
            })
            .collect(),
        observed: (sender, msg),
    }
}

/// Channel flavours, each defined by what it leaks to the adversary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelVariant {
    /// Authenticated: sender, receiver and content.
    #[default]
    Ac,
    /// Sender-receiver anonymous: sender and length.
    Sra,
    /// Sender anonymous: receiver and length.
    Ssa,
    /// Fully anonymous: length only.
    Fa,
    /// Secure: endpoints and length.
    Sc,
    /// Sender anonymous with content: receiver and content.
    Sa,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Leak {
    pub mid: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sender: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub receiver: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub content: Option<Vec<u8>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub length: Option<usize>,
}

pub fn ch_leak(variant: ChannelVariant, mid: u64, sender: usize, receiver: usize, msg: &[u8]) -> Leak {
    let mut leak = Leak {
        mid,
        ..Leak::default()
    };
    match variant {
        ChannelVariant::Ac => {
            leak.sender = Some(sender);
            leak.receiver = Some(receiver);
            leak.content = Some(msg.to_vec());
        }
        ChannelVariant::Sra => {
            leak.sender = Some(sender);
            leak.length = Some(msg.len());
        }
        ChannelVariant::Ssa => {
            leak.receiver = Some(receiver);
            leak.length = Some(msg.len());
        }
        ChannelVariant::Fa => leak.length = Some(msg.len()),
        ChannelVariant::Sc => {
            leak.sender = Some(sender);
            leak.receiver = Some(receiver);
            leak.length = Some(msg.len());
        }
        ChannelVariant::Sa => {
            leak.receiver = Some(receiver);
            leak.content = Some(msg.to_vec());
        }
    }
    leak
}

/// Channel endpoint that stamps every message with a fresh id.
#[derive(Clone, Debug, Default)]
pub struct ChannelService {
    pub variant: ChannelVariant,
    next_mid: u64,
}

impl ChannelService {
    pub fn new(variant: ChannelVariant) -> Self {
        Self { variant, next_mid: 0 }
    }

    pub fn ch_send(&mut self, sender: usize, receiver: usize, msg: &[u8]) -> Leak {
        self.next_mid += 1;
        ch_leak(self.variant, self.next_mid, sender, receiver, msg)
    }
}

/// Round-completion bits: a party reports completion and may move on once
/// every honest party has done so.
#[derive(Clone, Debug, Default)]
pub struct SyncService {
    bits: BTreeMap<usize, bool>,
}

impl SyncService {
    pub fn new(honest: impl IntoIterator<Item = usize>) -> Self {
        Self {
            bits: honest.into_iter().map(|p| (p, false)).collect(),
        }
    }

    /// Sets the caller's bit; returns true when this completed the round and
    /// all bits were cleared.
    pub fn sync_round_ok(&mut self, party: usize) -> bool {
        if let Some(b) = self.bits.get_mut(&party) {
            *b = true;
        }
        if !self.bits.is_empty() && self.bits.values().all(|b| *b) {
            self.bits.values_mut().for_each(|b| *b = false);
            return true;
        }
        false
    }

    /// The caller's bit: 1 while it still waits for the others.
    pub fn sync_request_round(&self, party: usize) -> u8 {
        u8::from(self.bits.get(&party).copied().unwrap_or(false))
    }
}
