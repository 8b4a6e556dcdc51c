//! Face images, embedding providers and the matching predicate.
//!
//! Two faces are considered the same person when the Euclidean distance
//! between their embeddings is strictly below the configured threshold.

use std::fmt;
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

/// Default embedding dimension.
pub const DEFAULT_DIMENSION: usize = 128;

/// Default match threshold in distance units.
pub const DEFAULT_TAU: f64 = 0.6;

/// Upper bound on the norm of the per-image perturbation added by
/// [`SyntheticProvider`]. Two images of one identity are therefore at most
/// twice this far apart.
pub const PERTURBATION_NORM: f64 = 0.15;

/// Seed the synthetic provider uses unless told otherwise.
pub const DEFAULT_SYNTHETIC_SEED: u64 = 0x4c6f_7374_466f_756e;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbeddingError {
    #[error("image payload cannot be decoded: {0}")]
    UndecodableImage(String),
    #[error("expected exactly one recognizable face, found {face_count}")]
    NoRecognizableFace { face_count: u32 },
    #[error("embedding provider failure: {0}")]
    ProviderFailure(String),
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("embedding component {index} is not finite")]
    NonFinite { index: usize },
    #[error("match threshold must be a positive finite number, got {0}")]
    InvalidThreshold(f64),
    #[error("identity label must not be empty")]
    EmptyIdentity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ImageFormat {
    Synthetic,
    Jpeg,
    Png,
}

impl ImageFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            ImageFormat::Synthetic => "SYNTHETIC",
            ImageFormat::Jpeg => "JPEG",
            ImageFormat::Png => "PNG",
        }
    }
}

impl fmt::Display for ImageFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A photo as uploaded: opaque bytes plus their declared format.
///
/// On the wire the payload is base64 text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaceImage {
    pub format: ImageFormat,
    #[serde(serialize_with = "ser_base64", deserialize_with = "de_base64")]
    pub payload: Vec<u8>,
}

fn ser_base64<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&BASE64.encode(bytes))
}

fn de_base64<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
    let text = String::deserialize(d)?;
    BASE64.decode(text.as_bytes()).map_err(serde::de::Error::custom)
}

impl FaceImage {
    pub fn new(format: ImageFormat, payload: Vec<u8>) -> Self {
        Self { format, payload }
    }

    /// Builds a SYNTHETIC image carrying the canonical JSON of `face`.
    pub fn synthetic(face: &SyntheticFace) -> Self {
        Self::new(ImageFormat::Synthetic, face.to_canonical_json().into_bytes())
    }

    /// Lowercase hex SHA-256 of the payload.
    pub fn sha256(&self) -> String {
        hex::encode(Sha256::digest(&self.payload))
    }
}

/// Decoded content of a SYNTHETIC image.
///
/// `face_count` defaults to one and is omitted from the canonical encoding in
/// that case; it exists so that group photos and faceless images can be
/// represented in fixtures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticFace {
    pub identity_label: String,
    pub variant: String,
    pub noise_seed: u64,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub face_count: u32,
}

fn one() -> u32 {
    1
}

fn is_one(n: &u32) -> bool {
    *n == 1
}

impl SyntheticFace {
    pub fn new(identity_label: impl Into<String>, variant: impl Into<String>, noise_seed: u64) -> Self {
        Self {
            identity_label: identity_label.into(),
            variant: variant.into(),
            noise_seed,
            face_count: 1,
        }
    }

    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string(self).expect("synthetic face serializes")
    }

    pub fn parse(payload: &[u8]) -> Result<Self, EmbeddingError> {
        let face: SyntheticFace = serde_json::from_slice(payload)
            .map_err(|e| EmbeddingError::UndecodableImage(format!("synthetic payload: {e}")))?;
        if face.identity_label.is_empty() {
            return Err(EmbeddingError::UndecodableImage(
                "synthetic payload has an empty identity_label".into(),
            ));
        }
        Ok(face)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceDetection {
    pub face_count: u32,
}

impl FaceDetection {
    pub fn is_recognizable(&self) -> bool {
        self.face_count == 1
    }
}

/// Counts faces using only what can be established locally.
///
/// SYNTHETIC payloads declare their faces. JPEG and PNG payloads are decoded to
/// check integrity, but locating faces in real pixels needs a model, so they
/// report zero faces here; use an [`HttpProvider`] for real photos.
pub fn detect_face(image: &FaceImage) -> Result<FaceDetection, EmbeddingError> {
    if image.payload.is_empty() {
        return Err(EmbeddingError::UndecodableImage("empty payload".into()));
    }
    match image.format {
        ImageFormat::Synthetic => SyntheticFace::parse(&image.payload).map(|f| FaceDetection {
            face_count: f.face_count,
        }),
        ImageFormat::Jpeg | ImageFormat::Png => {
            let fmt = if image.format == ImageFormat::Jpeg {
                image::ImageFormat::Jpeg
            } else {
                image::ImageFormat::Png
            };
            image::load_from_memory_with_format(&image.payload, fmt)
                .map_err(|e| EmbeddingError::UndecodableImage(format!("{}: {e}", image.format)))?;
            Ok(FaceDetection { face_count: 0 })
        }
    }
}

/// A fixed-dimension embedding of one face. Components are always finite.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite { index });
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl<'de> Deserialize<'de> for EmbeddingVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let values = Vec::<f64>::deserialize(d)?;
        EmbeddingVector::new(values).map_err(serde::de::Error::custom)
    }
}

/// Distance strictly below `tau` means "same person".
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
#[serde(transparent)]
pub struct MatchThreshold(f64);

impl MatchThreshold {
    pub fn new(tau: f64) -> Result<Self, EmbeddingError> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Self(tau))
        } else {
            Err(EmbeddingError::InvalidThreshold(tau))
        }
    }

    pub fn tau(self) -> f64 {
        self.0
    }
}

impl Default for MatchThreshold {
    fn default() -> Self {
        Self(DEFAULT_TAU)
    }
}

impl<'de> Deserialize<'de> for MatchThreshold {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        MatchThreshold::new(f64::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// Euclidean distance. Components are summed in index order.
pub fn distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(a.0
        .iter()
        .zip(&b.0)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

pub fn is_match(
    a: &EmbeddingVector,
    b: &EmbeddingVector,
    threshold: MatchThreshold,
) -> Result<bool, EmbeddingError> {
    Ok(distance(a, b)? < threshold.tau())
}

/// Turns face images into embeddings.
pub trait EmbeddingProvider: Send + Sync {
    fn dimension(&self) -> usize;

    fn detect(&self, image: &FaceImage) -> Result<FaceDetection, EmbeddingError>;

    /// Embeds the single face in `image`. Callers go through [`encode_face`],
    /// which checks detection first.
    fn embed(&self, image: &FaceImage) -> Result<EmbeddingVector, EmbeddingError>;
}

/// Detects, then embeds. Rejects images without exactly one face.
pub fn encode_face(
    image: &FaceImage,
    provider: &dyn EmbeddingProvider,
) -> Result<EmbeddingVector, EmbeddingError> {
    let detection = provider.detect(image)?;
    if !detection.is_recognizable() {
        return Err(EmbeddingError::NoRecognizableFace {
            face_count: detection.face_count,
        });
    }
    let vector = provider.embed(image)?;
    if vector.len() != provider.dimension() {
        return Err(EmbeddingError::DimensionMismatch {
            left: vector.len(),
            right: provider.dimension(),
        });
    }
    Ok(vector)
}

/// Deterministic stand-in for a face model.
///
/// Each identity label owns a unit base vector drawn from a generator keyed by
/// (provider seed, label). Each image adds a perturbation keyed by
/// (seed, label, variant, noise_seed) whose norm is uniform in
/// `[0, PERTURBATION_NORM)`. Images of one identity are thus within
/// `2 * PERTURBATION_NORM` of each other, while independent identities sit
/// near `sqrt(2)` apart in high dimension.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    dimension: usize,
    seed: u64,
}

impl Default for SyntheticProvider {
    fn default() -> Self {
        Self::new(DEFAULT_DIMENSION, DEFAULT_SYNTHETIC_SEED)
    }
}

impl SyntheticProvider {
    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension, seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn keyed_rng(&self, domain: &str, parts: &[&[u8]]) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(domain.as_bytes());
        for part in parts {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part);
        }
        ChaCha8Rng::from_seed(hasher.finalize().into())
    }

    fn unit_gaussian(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..self.dimension).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }

    /// Unit base vector for an identity.
    pub fn identity_base(&self, identity_label: &str) -> Vec<f64> {
        let mut rng = self.keyed_rng("base", &[identity_label.as_bytes()]);
        self.unit_gaussian(&mut rng)
    }

    pub fn synthetic_embed(
        &self,
        identity_label: &str,
        variant: &str,
        noise_seed: u64,
    ) -> Result<EmbeddingVector, EmbeddingError> {
        if identity_label.is_empty() {
            return Err(EmbeddingError::EmptyIdentity);
        }
        let base = self.identity_base(identity_label);
        let mut rng = self.keyed_rng(
            "perturbation",
            &[identity_label.as_bytes(), variant.as_bytes(), &noise_seed.to_le_bytes()],
        );
        let direction = self.unit_gaussian(&mut rng);
        let radius = PERTURBATION_NORM * rng.gen::<f64>();
        EmbeddingVector::new(
            base.iter()
                .zip(&direction)
                .map(|(u, d)| u + radius * d)
                .collect(),
        )
    }
}

impl EmbeddingProvider for SyntheticProvider {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn detect(&self, image: &FaceImage) -> Result<FaceDetection, EmbeddingError> {
        detect_face(image)
    }

    fn embed(&self, image: &FaceImage) -> Result<EmbeddingVector, EmbeddingError> {
        match image.format {
            ImageFormat::Synthetic => {
                let face = SyntheticFace::parse(&image.payload)?;
                self.synthetic_embed(&face.identity_label, &face.variant, face.noise_seed)
            }
            other => Err(EmbeddingError::ProviderFailure(format!(
                "synthetic provider cannot embed {other} images"
            ))),
        }
    }
}

/// Client for an out-of-process model server.
///
/// The server receives raw image bytes with the declared format in the
/// `X-Image-Format` header:
///
/// - `POST {endpoint}/detect` answers `{"face_count": n}`
/// - `POST {endpoint}/embed` answers `{"embedding": [f64; D]}`
///
/// Uses a blocking client, so it must not be called from inside an async task.
#[derive(Debug, Clone)]
pub struct HttpProvider {
    endpoint: String,
    dimension: usize,
    client: reqwest::blocking::Client,
}

#[derive(Deserialize)]
struct DetectReply {
    face_count: u32,
}

#[derive(Deserialize)]
struct EmbedReply {
    embedding: EmbeddingVector,
}

impl HttpProvider {
    pub fn new(endpoint: impl Into<String>, dimension: usize, timeout: Duration) -> Result<Self, EmbeddingError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EmbeddingError::ProviderFailure(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into().trim_end_matches('/').to_string(),
            dimension,
            client,
        })
    }

    fn post<T: serde::de::DeserializeOwned>(&self, route: &str, image: &FaceImage) -> Result<T, EmbeddingError> {
        let fail = |e: reqwest::Error| EmbeddingError::ProviderFailure(e.to_string());
        let resp = self
            .client
            .post(format!("{}/{route}", self.endpoint))
            .header("X-Image-Format", image.format.as_str())
            .header(reqwest::header::CONTENT_TYPE, "application/octet-stream")
            .body(image.payload.clone())
            .send()
            .map_err(fail)?;
        match resp.status() {
            s if s.is_success() => resp.json::<T>().map_err(fail),
            s if s == reqwest::StatusCode::UNPROCESSABLE_ENTITY => Err(EmbeddingError::UndecodableImage(
                resp.text().unwrap_or_default(),
            )),
            s => Err(EmbeddingError::ProviderFailure(format!("model server answered {s}"))),
        }
    }
}

impl EmbeddingProvider for HttpProvider {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn detect(&self, image: &FaceImage) -> Result<FaceDetection, EmbeddingError> {
        if image.payload.is_empty() {
            return Err(EmbeddingError::UndecodableImage("empty payload".into()));
        }
        self.post::<DetectReply>("detect", image).map(|r| FaceDetection {
            face_count: r.face_count,
        })
    }

    fn embed(&self, image: &FaceImage) -> Result<EmbeddingVector, EmbeddingError> {
        self.post::<EmbedReply>("embed", image).map(|r| r.embedding)
    }
}
