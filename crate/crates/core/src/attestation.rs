//! Simulated trusted hardware.
//!
//! A node's software stack is measured into an ordered list of component
//! digests plus a summary hash. A node with a (simulated) TPM signs the
//! summary together with a verifier-chosen nonce; the verifier checks the
//! signature against the node's endorsement key and the summary against its
//! list of trusted platforms. Platform certificates from a trusted issuer are
//! the alternative for clouds without attestation hardware.
//!
//! Signatures are HMAC-SHA256. Hardware keys never leave [`Tpm`]; verifiers
//! get an opaque [`EndorsementKey`].

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::RngCore;
use thiserror::Error;

use crate::crypto::{sha256, SecretKey, DIGEST_LEN};
use crate::NodeId;

pub type Digest = [u8; DIGEST_LEN];

pub const NONCE_LEN: usize = 16;
pub const QUOTE_WIRE_LEN: usize = DIGEST_LEN + NONCE_LEN + DIGEST_LEN;
pub const PLATFORM_CERT_LEN: usize = 8 + DIGEST_LEN;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttestationError {
    #[error("cannot measure an empty software stack")]
    EmptyStack,
    #[error("node has no hardware key")]
    NoHardwareKey,
    #[error("node has no measured stack")]
    NotMeasured,
    #[error("signature does not verify")]
    InvalidSignature,
}

/// Digest of a software component image.
pub fn component_digest(image: &[u8]) -> Digest {
    sha256(&[image])
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StackMeasurement {
    components: Vec<(String, Digest)>,
    summary: Digest,
}

impl StackMeasurement {
    /// Summary only, as recovered from the quote wire form.
    pub fn from_summary(summary: Digest) -> Self {
        StackMeasurement { components: Vec::new(), summary }
    }

    pub fn summary(&self) -> &Digest {
        &self.summary
    }

    pub fn components(&self) -> &[(String, Digest)] {
        &self.components
    }

    pub fn has_component(&self, name: &str) -> bool {
        self.components.iter().any(|(n, _)| n == name)
    }

    /// True when the component list (if present) hashes to the summary.
    pub fn is_consistent(&self) -> bool {
        self.components.is_empty() || summarize(&self.components) == self.summary
    }
}

fn summarize(components: &[(String, Digest)]) -> Digest {
    let parts: Vec<&[u8]> = components.iter().map(|(_, d)| d.as_slice()).collect();
    sha256(&parts)
}

/// The summary is SHA-256 over the concatenated component digests, in order.
pub fn measure_stack(
    components: impl IntoIterator<Item = (String, Digest)>,
) -> Result<StackMeasurement, AttestationError> {
    let components: Vec<_> = components.into_iter().collect();
    if components.is_empty() {
        return Err(AttestationError::EmptyStack);
    }
    let summary = summarize(&components);
    Ok(StackMeasurement { components, summary })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Nonce(pub [u8; NONCE_LEN]);

impl Nonce {
    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut n = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut n);
        Nonce(n)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttestationQuote {
    pub measurement: StackMeasurement,
    pub nonce: Nonce,
    pub signature: Digest,
}

impl AttestationQuote {
    /// `summary 32B ‖ nonce 16B ‖ signature 32B`
    pub fn to_wire(&self) -> [u8; QUOTE_WIRE_LEN] {
        let mut out = [0u8; QUOTE_WIRE_LEN];
        out[..32].copy_from_slice(&self.measurement.summary);
        out[32..48].copy_from_slice(&self.nonce.0);
        out[48..].copy_from_slice(&self.signature);
        out
    }

    pub fn from_wire(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != QUOTE_WIRE_LEN {
            return None;
        }
        Some(AttestationQuote {
            measurement: StackMeasurement::from_summary(bytes[..32].try_into().ok()?),
            nonce: Nonce(bytes[32..48].try_into().ok()?),
            signature: bytes[48..].try_into().ok()?,
        })
    }
}

/// Per-node hardware root. The key is sealed: only signing is exposed.
#[derive(Debug)]
pub struct Tpm {
    key: Arc<SecretKey>,
}

impl Tpm {
    pub fn provision<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        Tpm { key: Arc::new(SecretKey::generate(rng)) }
    }

    pub fn endorsement(&self) -> EndorsementKey {
        EndorsementKey { key: Arc::clone(&self.key) }
    }

    fn sign(&self, summary: &Digest, nonce: &Nonce) -> Digest {
        self.key.sign(&[summary, &nonce.0])
    }
}

/// Verification handle for one node's hardware key.
#[derive(Clone, Debug)]
pub struct EndorsementKey {
    key: Arc<SecretKey>,
}

impl EndorsementKey {
    fn verify(&self, quote: &AttestationQuote) -> bool {
        self.key
            .verify(&[&quote.measurement.summary, &quote.nonce.0], &quote.signature)
    }
}

/// What a node brings to attestation: an optional TPM and the stack it
/// booted.
#[derive(Debug, Default)]
pub struct Platform {
    pub tpm: Option<Tpm>,
    pub stack: Option<StackMeasurement>,
}

pub fn produce_quote(platform: &Platform, nonce: Nonce) -> Result<AttestationQuote, AttestationError> {
    let tpm = platform.tpm.as_ref().ok_or(AttestationError::NoHardwareKey)?;
    let measurement = platform.stack.clone().ok_or(AttestationError::NotMeasured)?;
    let signature = tpm.sign(&measurement.summary, &nonce);
    Ok(AttestationQuote { measurement, nonce, signature })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrustedHashList {
    entries: BTreeSet<Digest>,
}

impl TrustedHashList {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, summary: Digest) {
        self.entries.insert(summary);
    }

    pub fn contains(&self, summary: &Digest) -> bool {
        self.entries.contains(summary)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl FromIterator<Digest> for TrustedHashList {
    fn from_iter<I: IntoIterator<Item = Digest>>(iter: I) -> Self {
        TrustedHashList { entries: iter.into_iter().collect() }
    }
}

pub fn verify_quote(
    quote: &AttestationQuote,
    nonce: &Nonce,
    trusted: &TrustedHashList,
    endorsement: &EndorsementKey,
) -> bool {
    quote.nonce == *nonce
        && quote.measurement.is_consistent()
        && endorsement.verify(quote)
        && trusted.contains(&quote.measurement.summary)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlatformCertificate {
    pub platform: NodeId,
    pub signature: Digest,
}

impl PlatformCertificate {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.platform.0.to_be_bytes().to_vec();
        out.extend_from_slice(&self.signature);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        if bytes.len() != PLATFORM_CERT_LEN {
            return None;
        }
        Some(PlatformCertificate {
            platform: NodeId(u64::from_be_bytes(bytes[..8].try_into().ok()?)),
            signature: bytes[8..].try_into().ok()?,
        })
    }
}

/// A trusted third party (e.g. an OS vendor) that vouches for cloud
/// platforms it has validated out of band.
#[derive(Debug)]
pub struct CertificateIssuer {
    key: Arc<SecretKey>,
}

impl CertificateIssuer {
    pub fn new<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        CertificateIssuer { key: Arc::new(SecretKey::generate(rng)) }
    }

    pub fn issue_platform_cert(&self, platform: NodeId) -> PlatformCertificate {
        PlatformCertificate {
            platform,
            signature: self.key.sign(&[b"platform", &platform.0.to_be_bytes()]),
        }
    }

    pub fn verifier(&self) -> IssuerVerifier {
        IssuerVerifier { key: Arc::clone(&self.key) }
    }
}

#[derive(Clone, Debug)]
pub struct IssuerVerifier {
    key: Arc<SecretKey>,
}

impl IssuerVerifier {
    pub fn verify_platform_cert(&self, cert: &PlatformCertificate) -> bool {
        self.key
            .verify(&[b"platform", &cert.platform.0.to_be_bytes()], &cert.signature)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerificationMode {
    QuoteOnly,
    CertOnly,
    QuoteOrCert,
}

/// Evidence a peer presents when asked to prove it is a trusted platform.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PeerEvidence {
    Quote(AttestationQuote),
    Certificate(PlatformCertificate),
}

/// A verifier's configuration: accepted evidence kinds, the trusted stack
/// summaries, and the certificate issuer it recognizes.
#[derive(Clone, Debug)]
pub struct VerificationPolicy {
    pub mode: VerificationMode,
    pub trusted: TrustedHashList,
    pub issuer: Option<IssuerVerifier>,
}

impl VerificationPolicy {
    /// `endorsement` is the hardware key registered for `peer`, if any.
    pub fn accepts(
        &self,
        peer: NodeId,
        evidence: &PeerEvidence,
        nonce: &Nonce,
        endorsement: Option<&EndorsementKey>,
    ) -> bool {
        match evidence {
            PeerEvidence::Quote(quote) => {
                self.mode != VerificationMode::CertOnly
                    && endorsement.is_some_and(|ek| verify_quote(quote, nonce, &self.trusted, ek))
            }
            PeerEvidence::Certificate(cert) => {
                self.mode != VerificationMode::QuoteOnly
                    && cert.platform == peer
                    && self
                        .issuer
                        .as_ref()
                        .is_some_and(|issuer| issuer.verify_platform_cert(cert))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stack(names: &[&str]) -> StackMeasurement {
        measure_stack(
            names
                .iter()
                .map(|n| (n.to_string(), component_digest(n.as_bytes()))),
        )
        .unwrap()
    }

    #[test]
    fn measurement_is_deterministic_and_order_sensitive() {
        assert_eq!(stack(&["magma"]).summary(), stack(&["magma"]).summary());
        let ab = stack(&["linux", "magma"]);
        let ba = stack(&["magma", "linux"]);
        assert_ne!(ab.summary(), ba.summary());
        // oracle: hash of the concatenated digests
        let mut concat = Vec::new();
        concat.extend_from_slice(&component_digest(b"magma"));
        concat.extend_from_slice(&component_digest(b"linux"));
        assert_eq!(ba.summary(), &crate::crypto::sha256(&[&concat]));
        assert_eq!(measure_stack(Vec::new()), Err(AttestationError::EmptyStack));
    }

    #[test]
    fn quote_round_trip_and_replay() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let platform = Platform {
            tpm: Some(Tpm::provision(&mut rng)),
            stack: Some(stack(&["linux", "magma"])),
        };
        let ek = platform.tpm.as_ref().unwrap().endorsement();
        let trusted: TrustedHashList = [*platform.stack.as_ref().unwrap().summary()].into_iter().collect();
        let n1 = Nonce::random(&mut rng);
        let q = produce_quote(&platform, n1).unwrap();
        assert!(verify_quote(&q, &n1, &trusted, &ek));

        let wire = AttestationQuote::from_wire(&q.to_wire()).unwrap();
        assert!(verify_quote(&wire, &n1, &trusted, &ek));

        let n2 = Nonce::random(&mut rng);
        assert!(!verify_quote(&q, &n2, &trusted, &ek));
        let mut relabeled = q.clone();
        relabeled.nonce = n2;
        assert!(!verify_quote(&relabeled, &n2, &trusted, &ek));
    }

    #[test]
    fn untrusted_or_tampered_stacks_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let honest = Platform {
            tpm: Some(Tpm::provision(&mut rng)),
            stack: Some(stack(&["linux", "magma"])),
        };
        let eve = Platform {
            tpm: Some(Tpm::provision(&mut rng)),
            stack: Some(stack(&["linux", "eve-service"])),
        };
        let trusted: TrustedHashList = [*honest.stack.as_ref().unwrap().summary()].into_iter().collect();
        let nonce = Nonce::random(&mut rng);

        let q = produce_quote(&eve, nonce).unwrap();
        assert!(!verify_quote(&q, &nonce, &trusted, &eve.tpm.as_ref().unwrap().endorsement()));

        // Eve presents the honest summary under her own key
        let mut forged = q.clone();
        forged.measurement = honest.stack.clone().unwrap();
        assert!(!verify_quote(&forged, &nonce, &trusted, &eve.tpm.as_ref().unwrap().endorsement()));

        // honest quote with a tampered component list
        let mut q = produce_quote(&honest, nonce).unwrap();
        q.measurement.components[1].1[0] ^= 1;
        assert!(!verify_quote(&q, &nonce, &trusted, &honest.tpm.as_ref().unwrap().endorsement()));
    }

    #[test]
    fn missing_hardware_is_reported() {
        let p = Platform { tpm: None, stack: Some(stack(&["agate"])) };
        assert_eq!(produce_quote(&p, Nonce([0; 16])), Err(AttestationError::NoHardwareKey));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Platform { tpm: Some(Tpm::provision(&mut rng)), stack: None };
        assert_eq!(produce_quote(&p, Nonce([0; 16])), Err(AttestationError::NotMeasured));
    }

    #[test]
    fn platform_certificates_and_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let issuer = CertificateIssuer::new(&mut rng);
        let cert = issuer.issue_platform_cert(NodeId(9));
        assert!(issuer.verifier().verify_platform_cert(&cert));
        assert_eq!(PlatformCertificate::from_bytes(&cert.to_bytes()), Some(cert.clone()));

        let mut forged = cert.clone();
        forged.platform = NodeId(10);
        assert!(!issuer.verifier().verify_platform_cert(&forged));
        let other = CertificateIssuer::new(&mut rng);
        assert!(!issuer.verifier().verify_platform_cert(&other.issue_platform_cert(NodeId(9))));

        let nonce = Nonce([1; 16]);
        let evidence = PeerEvidence::Certificate(cert);
        let mut policy = VerificationPolicy {
            mode: VerificationMode::QuoteOrCert,
            trusted: TrustedHashList::new(),
            issuer: Some(issuer.verifier()),
        };
        assert!(policy.accepts(NodeId(9), &evidence, &nonce, None));
        // a certificate for node 9 does not vouch for node 10
        assert!(!policy.accepts(NodeId(10), &evidence, &nonce, None));
        policy.mode = VerificationMode::QuoteOnly;
        assert!(!policy.accepts(NodeId(9), &evidence, &nonce, None));
    }
}
