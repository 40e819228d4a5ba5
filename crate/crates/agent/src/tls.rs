//! Mutually authenticated TLS for the baseline transport. Every NF gets a
//! self-signed certificate generated at startup; peers trust each other by
//! installing those certificates as root anchors, so a certificate outside
//! the topology fails the handshake on both sides.

use std::sync::Arc;

use rcgen::{CertificateParams, DistinguishedName, DnType, KeyPair, SanType};
use rustls::pki_types::{CertificateDer, PrivateKeyDer};
use rustls::server::WebPkiClientVerifier;
use rustls::{ClientConfig, RootCertStore, ServerConfig};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TlsError {
    #[error("certificate generation failed: {0}")]
    Generation(String),
    #[error("tls configuration failed: {0}")]
    Config(String),
}

/// A node's own certificate and private key.
pub struct TlsIdentity {
    pub common_name: String,
    pub cert: CertificateDer<'static>,
    key: PrivateKeyDer<'static>,
}

impl TlsIdentity {
    pub fn generate(common_name: &str) -> Result<TlsIdentity, TlsError> {
        let key_pair = KeyPair::generate().map_err(|e| TlsError::Generation(e.to_string()))?;
        let mut params = CertificateParams::default();
        let mut dn = DistinguishedName::new();
        dn.push(DnType::CommonName, common_name);
        params.distinguished_name = dn;
        params.subject_alt_names = vec![
            SanType::IpAddress("127.0.0.1".parse().expect("loopback parses")),
            SanType::DnsName(
                "localhost"
                    .try_into()
                    .map_err(|_| TlsError::Generation("localhost SAN".into()))?,
            ),
        ];
        let cert = params
            .self_signed(&key_pair)
            .map_err(|e| TlsError::Generation(e.to_string()))?;
        let key = PrivateKeyDer::try_from(key_pair.serialize_der())
            .map_err(|e| TlsError::Generation(e.to_string()))?;
        Ok(TlsIdentity {
            common_name: common_name.to_owned(),
            cert: cert.der().clone(),
            key,
        })
    }

    fn clone_key(&self) -> PrivateKeyDer<'static> {
        self.key.clone_key()
    }
}

/// Server and client configurations sharing one trust store.
#[derive(Clone)]
pub struct TlsContext {
    pub server: Arc<ServerConfig>,
    pub client: Arc<ClientConfig>,
}

/// Builds a mutual-TLS context: the node presents its own certificate in
/// both roles and accepts exactly the given peer certificates.
pub fn build_context(
    identity: &TlsIdentity,
    trusted_peers: &[CertificateDer<'static>],
) -> Result<TlsContext, TlsError> {
    let mut roots = RootCertStore::empty();
    for cert in trusted_peers {
        roots
            .add(cert.clone())
            .map_err(|e| TlsError::Config(e.to_string()))?;
    }
    let roots = Arc::new(roots);

    let verifier = WebPkiClientVerifier::builder(roots.clone())
        .build()
        .map_err(|e| TlsError::Config(e.to_string()))?;
    let server = ServerConfig::builder()
        .with_client_cert_verifier(verifier)
        .with_single_cert(vec![identity.cert.clone()], identity.clone_key())
        .map_err(|e| TlsError::Config(e.to_string()))?;

    let client = ClientConfig::builder()
        .with_root_certificates(roots)
        .with_client_auth_cert(vec![identity.cert.clone()], identity.clone_key())
        .map_err(|e| TlsError::Config(e.to_string()))?;

    Ok(TlsContext {
        server: Arc::new(server),
        client: Arc::new(client),
    })
}
