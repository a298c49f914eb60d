//! Primitive layer: SHA-256 digests, Ed25519 signatures, X25519 agreement,
//! ChaCha20-Poly1305 sealing and HMAC-SHA256, all driven by one seeded
//! generator so that every key, nonce and ciphertext is reproducible.

use std::collections::BTreeSet;
use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::ChaCha20Poly1305;
use ed25519_dalek::{Signer, SigningKey, Verifier, VerifyingKey};
use hmac::{Hmac, Mac};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest as _, Sha256};

pub const DIGEST_LEN: usize = 32;
pub const NONCE_LEN: usize = 12;
pub const SIGNATURE_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CryptoError {
    #[error("invalid group element")]
    InvalidGroupElement,
    #[error("authentication failure")]
    AuthenticationFailure,
    #[error("nonce reused under the same key")]
    NonceReuse,
}

/// 32-octet SHA-256 output.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; DIGEST_LEN]);

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        bytes.try_into().ok().map(Digest)
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(text: &str) -> Option<Self> {
        if text.len() != DIGEST_LEN * 2 || !text.is_ascii() {
            return None;
        }
        let mut out = [0u8; DIGEST_LEN];
        for (i, chunk) in text.as_bytes().chunks(2).enumerate() {
            let s = std::str::from_utf8(chunk).ok()?;
            out[i] = u8::from_str_radix(s, 16).ok()?;
        }
        Some(Digest(out))
    }

    /// First 8 hex characters, for logs and dumps.
    pub fn short(&self) -> String {
        self.to_hex()[..8].to_string()
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.short())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub fn hash(message: &[u8]) -> Digest {
    Digest(Sha256::digest(message).into())
}

/// Hash over a sequence of length-prefixed parts, so that part boundaries
/// cannot be shifted between fields.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for part in parts {
        h.update((part.len() as u32).to_be_bytes());
        h.update(part);
    }
    Digest(h.finalize().into())
}

/// The single source of randomness for a simulated world.
#[derive(Debug, Clone)]
pub struct SimRng(ChaCha20Rng);

impl SimRng {
    pub fn from_seed(seed: u64) -> Self {
        SimRng(ChaCha20Rng::seed_from_u64(seed))
    }

    pub fn bytes32(&mut self) -> [u8; 32] {
        let mut out = [0u8; 32];
        self.0.fill_bytes(&mut out);
        out
    }

    pub fn nonce(&mut self) -> Nonce {
        let mut out = [0u8; NONCE_LEN];
        self.0.fill_bytes(&mut out);
        Nonce(out)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }
}

/// 12-octet challenge or AEAD nonce.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Nonce(pub [u8; NONCE_LEN]);

impl Nonce {
    /// Nonce for a per-direction message counter.
    pub fn from_counter(direction: u8, counter: u64) -> Self {
        let mut out = [0u8; NONCE_LEN];
        out[0] = direction;
        out[4..].copy_from_slice(&counter.to_be_bytes());
        Nonce(out)
    }

    /// Sub-challenge derived from a base challenge and a label.
    pub fn derive(&self, label: &[u8]) -> Self {
        let d = hash_parts(&[b"transtrust/challenge", &self.0, label]);
        let mut out = [0u8; NONCE_LEN];
        out.copy_from_slice(&d.0[..NONCE_LEN]);
        Nonce(out)
    }
}

impl fmt::Debug for Nonce {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Nonce(")?;
        for b in &self.0[..4] {
            write!(f, "{b:02x}")?;
        }
        write!(f, "..)")
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature(pub [u8; SIGNATURE_LEN]);

impl Signature {
    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        bytes.try_into().ok().map(Signature)
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({:02x}{:02x}..)", self.0[0], self.0[1])
    }
}

/// Ed25519 verification key bytes. May hold an invalid point; verification
/// against such a key simply fails.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKey(pub [u8; 32]);

impl PublicKey {
    pub fn key_id(&self) -> Digest {
        hash(&self.0)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", self.key_id().short())
    }
}

#[derive(Clone)]
pub struct SignKeypair {
    secret: SigningKey,
    pub public: PublicKey,
    pub key_id: Digest,
}

impl SignKeypair {
    pub fn generate(rng: &mut SimRng) -> Self {
        let secret = SigningKey::from_bytes(&rng.bytes32());
        let public = PublicKey(secret.verifying_key().to_bytes());
        SignKeypair {
            secret,
            key_id: public.key_id(),
            public,
        }
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        Signature(self.secret.sign(message).to_bytes())
    }
}

impl fmt::Debug for SignKeypair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SignKeypair")
            .field("key_id", &self.key_id)
            .finish_non_exhaustive()
    }
}

pub fn sign(keypair: &SignKeypair, message: &[u8]) -> Signature {
    keypair.sign(message)
}

/// Returns false for a malformed key or signature instead of erroring.
pub fn verify(public: &PublicKey, message: &[u8], signature: &Signature) -> bool {
    let Ok(key) = VerifyingKey::from_bytes(&public.0) else {
        return false;
    };
    let sig = ed25519_dalek::Signature::from_bytes(&signature.0);
    key.verify(message, &sig).is_ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum KeyRole {
    X,
    Y,
    Transport,
}

impl KeyRole {
    pub fn label(self) -> &'static str {
        match self {
            KeyRole::X => "X",
            KeyRole::Y => "Y",
            KeyRole::Transport => "transport",
        }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct SharedSecret {
    pub bytes: [u8; 32],
    pub role: KeyRole,
}

impl SharedSecret {
    /// A labelled subkey of this secret. Both endpoints holding the same
    /// secret derive the same subkey.
    pub fn subkey(&self, role: KeyRole) -> SharedSecret {
        let d = hash_parts(&[b"transtrust/subkey", &self.bytes, role.label().as_bytes()]);
        SharedSecret { bytes: d.0, role }
    }

    pub fn fingerprint(&self) -> Digest {
        hash_parts(&[b"transtrust/fingerprint", &self.bytes])
    }
}

impl fmt::Debug for SharedSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SharedSecret({}, {})", self.role.label(), self.fingerprint().short())
    }
}

#[derive(Clone)]
pub struct DhSecret(x25519_dalek::StaticSecret);

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DhPublic(pub [u8; 32]);

impl fmt::Debug for DhPublic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DhPublic({:02x}{:02x}..)", self.0[0], self.0[1])
    }
}

impl fmt::Debug for DhSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("DhSecret(..)")
    }
}

pub fn dh_keygen(rng: &mut SimRng) -> (DhSecret, DhPublic) {
    let secret = x25519_dalek::StaticSecret::from(rng.bytes32());
    let public = x25519_dalek::PublicKey::from(&secret);
    (DhSecret(secret), DhPublic(public.to_bytes()))
}

/// Raw agreement hashed into a transport-role secret. Low-order and
/// all-zero peer points are rejected.
pub fn dh_derive(secret: &DhSecret, peer: &DhPublic) -> Result<SharedSecret, CryptoError> {
    if peer.0 == [0u8; 32] {
        return Err(CryptoError::InvalidGroupElement);
    }
    let shared = secret.0.diffie_hellman(&x25519_dalek::PublicKey::from(peer.0));
    if !shared.was_contributory() {
        return Err(CryptoError::InvalidGroupElement);
    }
    let d = hash_parts(&[b"transtrust/dh", shared.as_bytes()]);
    Ok(SharedSecret {
        bytes: d.0,
        role: KeyRole::Transport,
    })
}

pub fn aead_seal(key: &SharedSecret, nonce: &Nonce, aad: &[u8], plaintext: &[u8]) -> Vec<u8> {
    let cipher = ChaCha20Poly1305::new((&key.bytes).into());
    cipher
        .encrypt(
            (&nonce.0).into(),
            Payload {
                msg: plaintext,
                aad,
            },
        )
        .expect("in-memory encryption does not fail")
}

pub fn aead_open(
    key: &SharedSecret,
    nonce: &Nonce,
    aad: &[u8],
    ciphertext: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    let cipher = ChaCha20Poly1305::new((&key.bytes).into());
    cipher
        .decrypt(
            (&nonce.0).into(),
            Payload {
                msg: ciphertext,
                aad,
            },
        )
        .map_err(|_| CryptoError::AuthenticationFailure)
}

/// Records every (key, nonce) pair sealed under; a second use is refused.
#[derive(Debug, Default, Clone)]
pub struct NonceLedger {
    used: BTreeSet<(Digest, Nonce)>,
}

impl NonceLedger {
    pub fn seal(
        &mut self,
        key: &SharedSecret,
        nonce: &Nonce,
        aad: &[u8],
        plaintext: &[u8],
    ) -> Result<Vec<u8>, CryptoError> {
        if !self.used.insert((key.fingerprint(), *nonce)) {
            return Err(CryptoError::NonceReuse);
        }
        Ok(aead_seal(key, nonce, aad, plaintext))
    }
}

type HmacSha256 = Hmac<Sha256>;

pub fn mac(key: &[u8; 32], message: &[u8]) -> [u8; 32] {
    let mut m = <HmacSha256 as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    m.update(message);
    m.finalize().into_bytes().into()
}

pub fn mac_verify(key: &[u8; 32], message: &[u8], tag: &[u8]) -> bool {
    let mut m = <HmacSha256 as Mac>::new_from_slice(key).expect("hmac accepts any key length");
    m.update(message);
    m.verify_slice(tag).is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_of_empty_input_matches_reference() {
        // FIPS 180-2 test vector for SHA-256("").
        assert_eq!(
            hash(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn hash_distinguishes_single_octets() {
        assert_eq!(hash(b"abc"), hash(b"abc"));
        assert_ne!(hash(&[0x00]), hash(&[0x01]));
        assert_eq!(
            hash(&[0x00]).to_hex(),
            "6e340b9cffb37a989ca544e6bb780a2c78901d3fb33738768511a30617afa01d"
        );
    }

    #[test]
    fn signature_round_trip_and_separation() {
        let mut rng = SimRng::from_seed(1);
        let k1 = SignKeypair::generate(&mut rng);
        let k2 = SignKeypair::generate(&mut rng);
        let msg = b"attest me".to_vec();
        let sig = sign(&k1, &msg);
        assert!(verify(&k1.public, &msg, &sig));
        let mut flipped = msg.clone();
        flipped[0] ^= 0x01;
        assert!(!verify(&k1.public, &flipped, &sig));
        assert!(!verify(&k2.public, &msg, &sig));
        assert_eq!(k1.key_id, hash(&k1.public.0));
    }

    #[test]
    fn malformed_signature_is_false_not_panic() {
        let mut rng = SimRng::from_seed(2);
        let k = SignKeypair::generate(&mut rng);
        assert!(!verify(&k.public, b"m", &Signature([0xff; 64])));
        assert!(!verify(&PublicKey([0xff; 32]), b"m", &k.sign(b"m")));
    }

    #[test]
    fn dh_agreement_and_third_party() {
        let mut rng = SimRng::from_seed(3);
        let (s1, p1) = dh_keygen(&mut rng);
        let (s2, p2) = dh_keygen(&mut rng);
        let (_s3, p3) = dh_keygen(&mut rng);
        let k12 = dh_derive(&s1, &p2).unwrap();
        let k21 = dh_derive(&s2, &p1).unwrap();
        assert_eq!(k12, k21);
        assert_ne!(dh_derive(&s1, &p3).unwrap(), k12);
        assert_eq!(
            dh_derive(&s1, &DhPublic([0u8; 32])),
            Err(CryptoError::InvalidGroupElement)
        );
        // order-1 point (u = 1) is also non-contributory
        let mut one = [0u8; 32];
        one[0] = 1;
        assert_eq!(dh_derive(&s1, &DhPublic(one)), Err(CryptoError::InvalidGroupElement));
    }

    #[test]
    fn aead_round_trip_and_tamper() {
        let mut rng = SimRng::from_seed(4);
        let key = SharedSecret {
            bytes: rng.bytes32(),
            role: KeyRole::X,
        };
        let other = SharedSecret {
            bytes: rng.bytes32(),
            role: KeyRole::X,
        };
        let nonce = rng.nonce();
        let ct = aead_seal(&key, &nonce, b"hdr", b"tau bytes");
        assert_eq!(aead_open(&key, &nonce, b"hdr", &ct).unwrap(), b"tau bytes");
        let mut bad = ct.clone();
        bad[0] ^= 1;
        assert_eq!(
            aead_open(&key, &nonce, b"hdr", &bad),
            Err(CryptoError::AuthenticationFailure)
        );
        assert!(aead_open(&other, &nonce, b"hdr", &ct).is_err());
        assert!(aead_open(&key, &nonce, b"hdx", &ct).is_err());
        assert!(aead_open(&key, &Nonce::from_counter(0, 9), b"hdr", &ct).is_err());
    }

    #[test]
    fn aead_every_byte_position_is_tamper_evident() {
        let mut rng = SimRng::from_seed(5);
        let key = SharedSecret {
            bytes: rng.bytes32(),
            role: KeyRole::Y,
        };
        let nonce = rng.nonce();
        let msg: Vec<u8> = (0u8..64).collect();
        let ct = aead_seal(&key, &nonce, b"", &msg);
        for i in 0..ct.len() {
            let mut bad = ct.clone();
            bad[i] ^= 0x80;
            assert!(aead_open(&key, &nonce, b"", &bad).is_err(), "byte {i}");
        }
    }

    #[test]
    fn nonce_ledger_refuses_reuse() {
        let mut rng = SimRng::from_seed(6);
        let key = SharedSecret {
            bytes: rng.bytes32(),
            role: KeyRole::Transport,
        };
        let mut ledger = NonceLedger::default();
        let n = Nonce::from_counter(1, 0);
        ledger.seal(&key, &n, b"", b"a").unwrap();
        assert_eq!(ledger.seal(&key, &n, b"", b"b"), Err(CryptoError::NonceReuse));
        ledger.seal(&key, &Nonce::from_counter(1, 1), b"", b"b").unwrap();
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let mut a = SimRng::from_seed(77);
        let mut b = SimRng::from_seed(77);
        assert_eq!(SignKeypair::generate(&mut a).key_id, SignKeypair::generate(&mut b).key_id);
        assert_eq!(dh_keygen(&mut a).1, dh_keygen(&mut b).1);
        assert_eq!(a.nonce(), b.nonce());
        let k = SharedSecret {
            bytes: a.bytes32(),
            role: KeyRole::X,
        };
        let k2 = SharedSecret {
            bytes: b.bytes32(),
            role: KeyRole::X,
        };
        let n = Nonce::from_counter(0, 3);
        assert_eq!(aead_seal(&k, &n, b"", b"p"), aead_seal(&k2, &n, b"", b"p"));
    }

    #[test]
    fn mac_checks_key_and_message() {
        let key = [7u8; 32];
        let tag = mac(&key, b"challenge");
        assert!(mac_verify(&key, b"challenge", &tag));
        assert!(!mac_verify(&[8u8; 32], b"challenge", &tag));
        assert!(!mac_verify(&key, b"challengf", &tag));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(128))]

            #[test]
            fn dh_is_symmetric(seed in any::<u64>()) {
                let mut rng = SimRng::from_seed(seed);
                let (s1, p1) = dh_keygen(&mut rng);
                let (s2, p2) = dh_keygen(&mut rng);
                prop_assert_eq!(dh_derive(&s1, &p2).unwrap(), dh_derive(&s2, &p1).unwrap());
            }

            #[test]
            fn signatures_verify_for_any_message(seed in any::<u64>(), msg in proptest::collection::vec(any::<u8>(), 0..256)) {
                let mut rng = SimRng::from_seed(seed);
                let k = SignKeypair::generate(&mut rng);
                prop_assert!(verify(&k.public, &msg, &k.sign(&msg)));
            }
        }
    }
}
