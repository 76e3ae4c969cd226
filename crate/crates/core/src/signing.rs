//! Pluggable document signatures.
//!
//! The default scheme is HMAC-SHA256 with per-principal keys registered in
//! advance. Verification keys live in a [`KeyRing`]; signing keys in a
//! [`Credential`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use hmac::{Hmac, Mac};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::money::Money;
use crate::rfql::RfqRequest;
use crate::time::Timestamp;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SignatureError {
    #[error("no key registered for {0}")]
    UnknownPrincipal(String),
    #[error("signature by {0} does not verify")]
    BadSignature(String),
    #[error("expected signer {expected}, found {found}")]
    WrongSigner { expected: String, found: String },
    #[error("document carries {found} signatures, expected {expected}")]
    SignatureCount { expected: usize, found: usize },
    #[error("payload is not a valid {0}")]
    BadPayload(&'static str),
    #[error("key {0} is already registered")]
    KeyAlreadyRegistered(String),
    #[error("bad key material: {0}")]
    BadKey(String),
}

pub trait SignatureScheme: Send + Sync + fmt::Debug {
    fn sign(&self, secret: &[u8], payload: &[u8]) -> Vec<u8>;
    fn verify(&self, key: &[u8], payload: &[u8], signature: &[u8]) -> bool;
}

/// Keyed-hash authenticator; the verification key equals the signing key.
#[derive(Debug, Clone, Copy, Default)]
pub struct HmacSha256;

impl SignatureScheme for HmacSha256 {
    fn sign(&self, secret: &[u8], payload: &[u8]) -> Vec<u8> {
        let mut mac = Hmac::<Sha256>::new_from_slice(secret).expect("HMAC accepts any key length");
        mac.update(payload);
        mac.finalize().into_bytes().to_vec()
    }

    fn verify(&self, key: &[u8], payload: &[u8], signature: &[u8]) -> bool {
        let mut mac = Hmac::<Sha256>::new_from_slice(key).expect("HMAC accepts any key length");
        mac.update(payload);
        mac.verify_slice(signature).is_ok()
    }
}

pub fn default_scheme() -> Arc<dyn SignatureScheme> {
    Arc::new(HmacSha256)
}

/// Hex digest of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A principal's signing key.
#[derive(Clone)]
pub struct Credential {
    pub principal: String,
    secret: Vec<u8>,
    scheme: Arc<dyn SignatureScheme>,
}

impl fmt::Debug for Credential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Credential").field("principal", &self.principal).finish_non_exhaustive()
    }
}

impl Credential {
    pub fn new(principal: impl Into<String>, secret: Vec<u8>) -> Self {
        Credential {
            principal: principal.into(),
            secret,
            scheme: default_scheme(),
        }
    }

    pub fn with_scheme(mut self, scheme: Arc<dyn SignatureScheme>) -> Self {
        self.scheme = scheme;
        self
    }

    /// Deterministic key derived from a seed string, for tests and simulations.
    pub fn derived(principal: impl Into<String>, seed: &str) -> Self {
        let principal = principal.into();
        let secret = Sha256::digest(format!("{seed}/{principal}").as_bytes()).to_vec();
        Credential::new(principal, secret)
    }

    /// Reads a hex-encoded key file.
    pub fn load(principal: impl Into<String>, path: impl AsRef<Path>) -> Result<Self, SignatureError> {
        let secret = read_key_file(path.as_ref())?;
        Ok(Credential::new(principal, secret))
    }

    pub fn secret(&self) -> &[u8] {
        &self.secret
    }

    pub fn key_hex(&self) -> String {
        hex::encode(&self.secret)
    }

    pub fn sign(&self, payload: &[u8]) -> Signature {
        Signature {
            signer_id: self.principal.clone(),
            signature: self.scheme.sign(&self.secret, payload),
        }
    }

    /// Adds this principal's signature to the end of the document.
    pub fn countersign(&self, doc: &mut SignedDocument) {
        let sig = self.sign(&doc.payload);
        doc.signatures.push(sig);
    }
}

pub fn read_key_file(path: &Path) -> Result<Vec<u8>, SignatureError> {
    let text = std::fs::read_to_string(path).map_err(|e| SignatureError::BadKey(format!("{}: {e}", path.display())))?;
    hex::decode(text.trim()).map_err(|e| SignatureError::BadKey(format!("{}: {e}", path.display())))
}

/// Registered verification keys, one per principal.
#[derive(Debug, Clone)]
pub struct KeyRing {
    keys: BTreeMap<String, Vec<u8>>,
    scheme: Arc<dyn SignatureScheme>,
}

impl Default for KeyRing {
    fn default() -> Self {
        KeyRing {
            keys: BTreeMap::new(),
            scheme: default_scheme(),
        }
    }
}

impl KeyRing {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a key. Keys are immutable once registered; re-registering
    /// the same key is accepted.
    pub fn register(&mut self, principal: impl Into<String>, key: Vec<u8>) -> Result<(), SignatureError> {
        let principal = principal.into();
        match self.keys.get(&principal) {
            Some(existing) if *existing == key => Ok(()),
            Some(_) => Err(SignatureError::KeyAlreadyRegistered(principal)),
            None => {
                self.keys.insert(principal, key);
                Ok(())
            }
        }
    }

    pub fn register_credential(&mut self, cred: &Credential) -> Result<(), SignatureError> {
        self.register(cred.principal.clone(), cred.secret.clone())
    }

    pub fn contains(&self, principal: &str) -> bool {
        self.keys.contains_key(principal)
    }

    pub fn principals(&self) -> impl Iterator<Item = &str> {
        self.keys.keys().map(String::as_str)
    }

    /// Loads every `<principal>.key` file in a directory.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, SignatureError> {
        let mut ring = KeyRing::new();
        let dir = dir.as_ref();
        let entries = std::fs::read_dir(dir).map_err(|e| SignatureError::BadKey(format!("{}: {e}", dir.display())))?;
        for entry in entries.flatten() {
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("key") {
                continue;
            }
            let Some(principal) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            ring.register(principal.to_string(), read_key_file(&path)?)?;
        }
        Ok(ring)
    }

    pub fn verify(&self, payload: &[u8], sig: &Signature) -> Result<(), SignatureError> {
        let key = self
            .keys
            .get(&sig.signer_id)
            .ok_or_else(|| SignatureError::UnknownPrincipal(sig.signer_id.clone()))?;
        if self.scheme.verify(key, payload, &sig.signature) {
            Ok(())
        } else {
            Err(SignatureError::BadSignature(sig.signer_id.clone()))
        }
    }

    /// Checks that the document is signed by exactly `signers`, in order,
    /// and that every signature verifies.
    pub fn verify_chain(&self, doc: &SignedDocument, signers: &[&str]) -> Result<(), SignatureError> {
        if doc.signatures.len() != signers.len() {
            return Err(SignatureError::SignatureCount {
                expected: signers.len(),
                found: doc.signatures.len(),
            });
        }
        for (sig, expected) in doc.signatures.iter().zip(signers) {
            if sig.signer_id != *expected {
                return Err(SignatureError::WrongSigner {
                    expected: expected.to_string(),
                    found: sig.signer_id.clone(),
                });
            }
            self.verify(&doc.payload, sig)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    pub signer_id: String,
    #[serde(with = "hex_bytes")]
    pub signature: Vec<u8>,
}

/// Canonical payload bytes plus an ordered list of signatures over them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedDocument {
    #[serde(with = "hex_bytes")]
    pub payload: Vec<u8>,
    pub signatures: Vec<Signature>,
}

impl SignedDocument {
    pub fn new(payload: Vec<u8>) -> Self {
        SignedDocument {
            payload,
            signatures: Vec::new(),
        }
    }

    pub fn signed_by(payload: Vec<u8>, cred: &Credential) -> Self {
        let mut doc = Self::new(payload);
        cred.countersign(&mut doc);
        doc
    }

    pub fn digest(&self) -> String {
        sha256_hex(&self.payload)
    }

    pub fn decode<T: for<'de> Deserialize<'de>>(&self, what: &'static str) -> Result<T, SignatureError> {
        serde_json::from_slice(&self.payload).map_err(|_| SignatureError::BadPayload(what))
    }
}

/// Terms of a deal as signed by the user and then the resource.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DealTerms {
    pub auction_id: String,
    pub unit_index: usize,
    pub user_id: String,
    pub resource_id: String,
    pub reservation_id: String,
    pub price: Money,
    pub proposed_start: Timestamp,
    pub request: RfqRequest,
}

impl DealTerms {
    /// Canonical bytes: JSON with fields in declaration order.
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("deal terms serialize")
    }
}

/// A resource's notice that it released a settled reservation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CancellationNotice {
    pub reservation_id: String,
    pub user_id: String,
    pub resource_id: String,
    pub issued_at: Timestamp,
}

impl CancellationNotice {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("notice serializes")
    }
}

/// A principal's request for its own account statement.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BalanceQuery {
    pub principal: String,
    pub issued_at: Timestamp,
    /// How many recent entries to include.
    pub entries: usize,
}

impl BalanceQuery {
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("query serializes")
    }
}

/// Signs the deal terms with the user's credential.
pub fn sign_unit(terms: &DealTerms, user: &Credential) -> SignedDocument {
    SignedDocument::signed_by(terms.to_bytes(), user)
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        hex::decode(text).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn terms() -> DealTerms {
        DealTerms {
            auction_id: "a1".into(),
            unit_index: 0,
            user_id: "alice".into(),
            resource_id: "atlas1".into(),
            reservation_id: "atlas1-res-1".into(),
            price: Money::from_units(68),
            proposed_start: Timestamp::from_secs(1_700_000_000),
            request: RfqRequest::new("u0", Money::from_units(70), 16, 3600, Timestamp::from_secs(1_700_100_000)),
        }
    }

    fn ring(creds: &[&Credential]) -> KeyRing {
        let mut ring = KeyRing::new();
        for c in creds {
            ring.register_credential(c).unwrap();
        }
        ring
    }

    #[test]
    fn sign_then_verify() {
        let alice = Credential::derived("alice", "seed");
        let doc = sign_unit(&terms(), &alice);
        ring(&[&alice]).verify_chain(&doc, &["alice"]).unwrap();
        assert_eq!(doc.payload, terms().to_bytes());
    }

    #[test]
    fn other_key_does_not_verify() {
        let alice = Credential::derived("alice", "seed");
        let impostor = Credential::derived("alice", "other-seed");
        let doc = sign_unit(&terms(), &impostor);
        assert_eq!(
            ring(&[&alice]).verify_chain(&doc, &["alice"]),
            Err(SignatureError::BadSignature("alice".into()))
        );
    }

    #[test]
    fn any_flipped_payload_byte_is_detected() {
        let alice = Credential::derived("alice", "seed");
        let ring = ring(&[&alice]);
        let doc = sign_unit(&terms(), &alice);
        for i in 0..doc.payload.len() {
            let mut bad = doc.clone();
            bad.payload[i] ^= 0x01;
            assert!(ring.verify_chain(&bad, &["alice"]).is_err(), "byte {i}");
        }
    }

    #[test]
    fn chain_order_and_count_are_enforced() {
        let alice = Credential::derived("alice", "seed");
        let atlas = Credential::derived("atlas1", "seed");
        let ring = ring(&[&alice, &atlas]);
        let mut doc = sign_unit(&terms(), &alice);
        atlas.countersign(&mut doc);
        ring.verify_chain(&doc, &["alice", "atlas1"]).unwrap();
        assert!(matches!(
            ring.verify_chain(&doc, &["atlas1", "alice"]),
            Err(SignatureError::WrongSigner { .. })
        ));
        assert!(matches!(
            ring.verify_chain(&doc, &["alice"]),
            Err(SignatureError::SignatureCount { expected: 1, found: 2 })
        ));
    }

    #[test]
    fn keys_are_immutable() {
        let mut ring = KeyRing::new();
        ring.register("bob", vec![1, 2, 3]).unwrap();
        ring.register("bob", vec![1, 2, 3]).unwrap();
        assert_eq!(
            ring.register("bob", vec![9]),
            Err(SignatureError::KeyAlreadyRegistered("bob".into()))
        );
    }

    #[test]
    fn documents_round_trip_through_json() {
        let alice = Credential::derived("alice", "seed");
        let doc = sign_unit(&terms(), &alice);
        let json = serde_json::to_string(&doc).unwrap();
        let back: SignedDocument = serde_json::from_str(&json).unwrap();
        assert_eq!(back, doc);
        assert_eq!(back.decode::<DealTerms>("deal terms").unwrap(), terms());
    }

    #[test]
    fn key_directory_loads() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("alice.key"), "0a0b0c\n").unwrap();
        std::fs::write(dir.path().join("README"), "ignored").unwrap();
        let ring = KeyRing::load_dir(dir.path()).unwrap();
        assert_eq!(ring.principals().collect::<Vec<_>>(), vec!["alice"]);
    }
}
