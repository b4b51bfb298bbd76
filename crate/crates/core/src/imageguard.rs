//! Sensitive-image protection: LSB watermarking and encrypt-then-embed
//! steganography into a fixed cover image.
//!
//! Embedded payload layout (bits MSB first, one bit per RGB channel,
//! row-major): magic `0x43464153` | version u8 | length u32 BE | blob.
//! The blob is `image_fp (32 bytes) | nonce (12) | AEAD ciphertext`, the
//! fingerprint doubling as associated data.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Cursor;
use std::sync::{Arc, LazyLock};

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use chrono::{DateTime, Utc};
use image::{ImageFormat, RgbImage, RgbaImage};
use parking_lot::Mutex;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{Household, Timestamp};

pub const STEGO_MAGIC: u32 = 0x4346_4153;
pub const STEGO_VERSION: u8 = 1;
const STEGO_HEADER_BYTES: usize = 9;
const FP_BYTES: usize = 32;
const NONCE_BYTES: usize = 12;

pub const WATERMARK_MAGIC: u32 = 0x4346_574D;
pub const WATERMARK_PIXELS: usize = 512;
pub const MIN_WATERMARK_PIXELS: u64 = 1024;

static COVER_PNG: &[u8] = include_bytes!("../data/images/cover.png");
static NOTICE_PNG: &[u8] = include_bytes!("../data/images/notice.png");

static COVER: LazyLock<RgbImage> = LazyLock::new(|| {
    image::load_from_memory(COVER_PNG)
        .expect("bundled cover decodes")
        .to_rgb8()
});

/// The bundled static cover image.
pub fn default_cover() -> &'static RgbImage {
    &COVER
}

/// Static image shown in place of blocked feed images.
pub fn notice_image() -> &'static [u8] {
    NOTICE_PNG
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GuardError {
    #[error("image: {0}")]
    Image(String),
    #[error("image has {pixels} pixels, at least {MIN_WATERMARK_PIXELS} are needed")]
    TooSmall { pixels: u64 },
    #[error("watermark fields take {bytes} bytes, at most {max} fit")]
    MarkTooLarge { bytes: usize, max: usize },
    #[error("cover capacity exceeded: {required_bits} bits required, {available_bits} available")]
    Capacity {
        required_bits: u64,
        available_bits: u64,
    },
    #[error("key service: {0}")]
    KeyService(String),
}

fn png_bytes_rgb(img: &RgbImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("png encoding to memory");
    out.into_inner()
}

fn png_bytes_rgba(img: &RgbaImage) -> Vec<u8> {
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .expect("png encoding to memory");
    out.into_inner()
}

fn decode_rgba(bytes: &[u8]) -> Result<RgbaImage, GuardError> {
    image::load_from_memory(bytes)
        .map(|i| i.to_rgba8())
        .map_err(|e| GuardError::Image(e.to_string()))
}

/// Hex SHA-256 of the original bytes.
pub fn image_fingerprint(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Watermark {
    pub household_id: String,
    pub member_id: String,
    /// Unix seconds.
    pub timestamp: i64,
    pub signature: [u8; 8],
}

impl Watermark {
    pub fn new(household_id: &str, member_id: &str, at: Timestamp) -> Self {
        let timestamp = at.timestamp();
        Self {
            household_id: household_id.to_string(),
            member_id: member_id.to_string(),
            timestamp,
            signature: Self::sign(household_id, member_id, timestamp),
        }
    }

    fn sign(household_id: &str, member_id: &str, timestamp: i64) -> [u8; 8] {
        let mut h = Sha256::new();
        h.update(household_id.as_bytes());
        h.update([0]);
        h.update(member_id.as_bytes());
        h.update([0]);
        h.update(timestamp.to_be_bytes());
        let d = h.finalize();
        let mut sig = [0u8; 8];
        sig.copy_from_slice(&d[..8]);
        sig
    }

    pub fn verify(&self) -> bool {
        self.signature == Self::sign(&self.household_id, &self.member_id, self.timestamp)
    }

    pub fn marked_at(&self) -> Option<DateTime<Utc>> {
        DateTime::from_timestamp(self.timestamp, 0)
    }

    fn encode(&self) -> Result<Vec<u8>, GuardError> {
        let mut body = Vec::new();
        for s in [&self.household_id, &self.member_id] {
            let len = u8::try_from(s.len()).map_err(|_| GuardError::MarkTooLarge {
                bytes: s.len(),
                max: 255,
            })?;
            body.push(len);
            body.extend_from_slice(s.as_bytes());
        }
        body.extend_from_slice(&self.timestamp.to_be_bytes());
        body.extend_from_slice(&self.signature);
        let max = WATERMARK_PIXELS / 8 - 5;
        if body.len() > max {
            return Err(GuardError::MarkTooLarge {
                bytes: body.len(),
                max,
            });
        }
        let mut out = WATERMARK_MAGIC.to_be_bytes().to_vec();
        out.push(body.len() as u8);
        out.extend(body);
        Ok(out)
    }

    fn decode(bytes: &[u8]) -> Option<Self> {
        if bytes.len() < 5 || bytes[..4] != WATERMARK_MAGIC.to_be_bytes() {
            return None;
        }
        let len = bytes[4] as usize;
        let body = bytes.get(5..5 + len)?;
        let mut pos = 0;
        let mut take_str = || -> Option<String> {
            let n = *body.get(pos)? as usize;
            let s = std::str::from_utf8(body.get(pos + 1..pos + 1 + n)?).ok()?;
            pos += 1 + n;
            Some(s.to_string())
        };
        let household_id = take_str()?;
        let member_id = take_str()?;
        let rest = body.get(pos..)?;
        if rest.len() != 16 {
            return None;
        }
        let timestamp = i64::from_be_bytes(rest[..8].try_into().ok()?);
        let signature: [u8; 8] = rest[8..16].try_into().ok()?;
        Some(Self {
            household_id,
            member_id,
            timestamp,
            signature,
        })
    }
}

fn bits_of(bytes: &[u8]) -> impl Iterator<Item = u8> + '_ {
    bytes
        .iter()
        .flat_map(|b| (0..8).rev().map(move |i| (b >> i) & 1))
}

fn bytes_from_bits(bits: impl Iterator<Item = u8>, n: usize) -> Vec<u8> {
    let mut out = vec![0u8; n];
    for (i, bit) in bits.take(n * 8).enumerate() {
        out[i / 8] |= bit << (7 - i % 8);
    }
    out
}

/// Embeds `mark` in the blue-channel LSBs of the first 512 pixels.
pub fn watermark_image(img: &mut RgbaImage, mark: &Watermark) -> Result<(), GuardError> {
    let pixels = u64::from(img.width()) * u64::from(img.height());
    if pixels < MIN_WATERMARK_PIXELS {
        return Err(GuardError::TooSmall { pixels });
    }
    let encoded = mark.encode()?;
    let mut bits: Vec<u8> = bits_of(&encoded).collect();
    bits.resize(WATERMARK_PIXELS, 0);
    for (px, bit) in img.pixels_mut().zip(bits) {
        px[2] = (px[2] & !1) | bit;
    }
    Ok(())
}

pub fn extract_watermark_image(img: &RgbaImage) -> Option<Watermark> {
    if u64::from(img.width()) * u64::from(img.height()) < WATERMARK_PIXELS as u64 {
        return None;
    }
    let bits = img.pixels().take(WATERMARK_PIXELS).map(|p| p[2] & 1);
    Watermark::decode(&bytes_from_bits(bits, WATERMARK_PIXELS / 8))
}

/// Decodes, watermarks and re-encodes as PNG.
pub fn watermark(bytes: &[u8], mark: &Watermark) -> Result<Vec<u8>, GuardError> {
    let mut img = decode_rgba(bytes)?;
    watermark_image(&mut img, mark)?;
    Ok(png_bytes_rgba(&img))
}

/// `Ok(None)` when the image carries no mark.
pub fn extract_watermark(bytes: &[u8]) -> Result<Option<Watermark>, GuardError> {
    Ok(extract_watermark_image(&decode_rgba(bytes)?))
}

pub fn capacity_bits(cover: &RgbImage) -> u64 {
    u64::from(cover.width()) * u64::from(cover.height()) * 3
}

/// Writes `blob` behind the stego header into the cover's channel LSBs.
pub fn embed(cover: &RgbImage, blob: &[u8]) -> Result<RgbImage, GuardError> {
    let len = u32::try_from(blob.len()).map_err(|_| GuardError::Capacity {
        required_bits: (blob.len() as u64 + STEGO_HEADER_BYTES as u64) * 8,
        available_bits: capacity_bits(cover),
    })?;
    let required_bits = (blob.len() as u64 + STEGO_HEADER_BYTES as u64) * 8;
    let available_bits = capacity_bits(cover);
    if required_bits > available_bits {
        return Err(GuardError::Capacity {
            required_bits,
            available_bits,
        });
    }
    let mut payload = Vec::with_capacity(blob.len() + STEGO_HEADER_BYTES);
    payload.extend_from_slice(&STEGO_MAGIC.to_be_bytes());
    payload.push(STEGO_VERSION);
    payload.extend_from_slice(&len.to_be_bytes());
    payload.extend_from_slice(blob);
    let mut out = cover.clone();
    let channels = out.pixels_mut().flat_map(|p| p.0.iter_mut());
    for (c, bit) in channels.zip(bits_of(&payload)) {
        *c = (*c & !1) | bit;
    }
    Ok(out)
}

/// Reads the blob back; `None` when no valid header is present.
pub fn extract(img: &RgbImage) -> Option<Vec<u8>> {
    let lsb = || img.pixels().flat_map(|p| p.0).map(|c| c & 1);
    let header = bytes_from_bits(lsb(), STEGO_HEADER_BYTES);
    if header[..4] != STEGO_MAGIC.to_be_bytes() || header[4] != STEGO_VERSION {
        return None;
    }
    let len = u32::from_be_bytes(header[5..9].try_into().ok()?) as u64;
    if (len + STEGO_HEADER_BYTES as u64) * 8 > capacity_bits(img) {
        return None;
    }
    let all = bytes_from_bits(lsb(), STEGO_HEADER_BYTES + len as usize);
    Some(all[STEGO_HEADER_BYTES..].to_vec())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "group", content = "members")]
pub enum AudienceGroup {
    Family,
    Friends,
    Classmates,
    Custom(Vec<String>),
}

/// Group membership known to the child's IWP.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Directory {
    pub groups: BTreeMap<String, BTreeSet<String>>,
}

impl Directory {
    /// Family is the household roster plus any members tagged `family`.
    pub fn from_household(household: &Household) -> Self {
        let mut groups: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for m in &household.members {
            groups.entry("family".into()).or_default().insert(m.member_id.clone());
            for g in &m.groups {
                groups.entry(g.clone()).or_default().insert(m.member_id.clone());
            }
        }
        Self { groups }
    }

    pub fn add(&mut self, group: &str, member_id: &str) {
        self.groups
            .entry(group.to_string())
            .or_default()
            .insert(member_id.to_string());
    }

    /// Snapshot of member ids for `audience` at this moment.
    pub fn resolve(&self, audience: &[AudienceGroup]) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for g in audience {
            let name = match g {
                AudienceGroup::Family => "family",
                AudienceGroup::Friends => "friends",
                AudienceGroup::Classmates => "classmates",
                AudienceGroup::Custom(ids) => {
                    out.extend(ids.iter().cloned());
                    continue;
                }
            };
            if let Some(ids) = self.groups.get(name) {
                out.extend(ids.iter().cloned());
            }
        }
        out
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KeyServiceError {
    #[error("key service unavailable: {0}")]
    Unavailable(String),
    #[error("key service rejected request: {0}")]
    Rejected(String),
}

/// Key store for protected images; lives on the back end.
pub trait KeyService: Send + Sync {
    /// Stores `key` for `image_fp`, readable by `audience`. Returns a key ref.
    fn register(
        &self,
        image_fp: &str,
        audience: &BTreeSet<String>,
        key: &[u8; 32],
    ) -> Result<String, KeyServiceError>;

    /// Keys for `image_fp` that `viewer` may read; empty when denied.
    fn fetch(&self, image_fp: &str, viewer: &str) -> Result<Vec<[u8; 32]>, KeyServiceError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectedImage {
    /// PNG cover carrying the encrypted original.
    #[serde(with = "hex_bytes")]
    pub cover_bytes: Vec<u8>,
    pub image_fp: String,
    pub audience: BTreeSet<String>,
    pub key_ref: String,
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(b: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(b))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Unprotected {
    Original(Vec<u8>),
    /// The viewer gets the image they were served, unchanged.
    Cover(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TamperEntry {
    pub at: Timestamp,
    pub image_fp: String,
    pub viewer: String,
}

/// Protect/unprotect with a fixed cover and a key service.
pub struct ImageGuard {
    cover: RgbImage,
    keys: Arc<dyn KeyService>,
    tamper: Mutex<Vec<TamperEntry>>,
    registering: Mutex<BTreeSet<String>>,
}

impl ImageGuard {
    pub fn new(keys: Arc<dyn KeyService>) -> Self {
        Self::with_cover(default_cover().clone(), keys)
    }

    pub fn with_cover(cover: RgbImage, keys: Arc<dyn KeyService>) -> Self {
        Self {
            cover,
            keys,
            tamper: Mutex::new(Vec::new()),
            registering: Mutex::new(BTreeSet::new()),
        }
    }

    pub fn capacity_bits(&self) -> u64 {
        capacity_bits(&self.cover)
    }

    /// Bits needed to protect an original of `len` bytes.
    pub fn required_bits(len: usize) -> u64 {
        ((STEGO_HEADER_BYTES + FP_BYTES + NONCE_BYTES + len + 16) as u64) * 8
    }

    /// Encrypts `original` under a fresh key, embeds it in the cover and
    /// registers the key. Fails closed: no cover is produced unless the key
    /// is registered.
    pub fn protect(&self, original: &[u8], audience: BTreeSet<String>) -> Result<ProtectedImage, GuardError> {
        let required_bits = Self::required_bits(original.len());
        if required_bits > self.capacity_bits() {
            return Err(GuardError::Capacity {
                required_bits,
                available_bits: self.capacity_bits(),
            });
        }
        let fp_hex = image_fingerprint(original);
        let fp_raw = Sha256::digest(original);
        let mut key = [0u8; 32];
        let mut nonce = [0u8; NONCE_BYTES];
        rand::thread_rng().fill_bytes(&mut key);
        rand::thread_rng().fill_bytes(&mut nonce);
        let ct = ChaCha20Poly1305::new(Key::from_slice(&key))
            .encrypt(
                Nonce::from_slice(&nonce),
                Payload {
                    msg: original,
                    aad: &fp_raw,
                },
            )
            .map_err(|_| GuardError::Image("encryption failed".into()))?;
        let mut blob = Vec::with_capacity(FP_BYTES + NONCE_BYTES + ct.len());
        blob.extend_from_slice(&fp_raw);
        blob.extend_from_slice(&nonce);
        blob.extend_from_slice(&ct);
        let stego = embed(&self.cover, &blob)?;
        let key_ref = self.register_serialized(&fp_hex, &audience, &key)?;
        Ok(ProtectedImage {
            cover_bytes: png_bytes_rgb(&stego),
            image_fp: fp_hex,
            audience,
            key_ref,
        })
    }

    fn register_serialized(
        &self,
        fp: &str,
        audience: &BTreeSet<String>,
        key: &[u8; 32],
    ) -> Result<String, GuardError> {
        loop {
            if self.registering.lock().insert(fp.to_string()) {
                break;
            }
            std::thread::yield_now();
        }
        let out = self.keys.register(fp, audience, key);
        self.registering.lock().remove(fp);
        out.map_err(|e| GuardError::KeyService(e.to_string()))
    }

    /// Returns the original for authorized viewers and the served bytes
    /// otherwise. Authentication failures are logged as tampering.
    pub fn unprotect(&self, served: &[u8], viewer: &str) -> Unprotected {
        let cover = || Unprotected::Cover(served.to_vec());
        let Ok(img) = image::load_from_memory(served) else {
            return cover();
        };
        let Some(blob) = extract(&img.to_rgb8()) else {
            return cover();
        };
        if blob.len() < FP_BYTES + NONCE_BYTES + 16 {
            return cover();
        }
        let (fp_raw, rest) = blob.split_at(FP_BYTES);
        let (nonce, ct) = rest.split_at(NONCE_BYTES);
        let fp_hex = hex::encode(fp_raw);
        let keys = match self.keys.fetch(&fp_hex, viewer) {
            Ok(k) => k,
            Err(err) => {
                tracing::warn!(%err, "key fetch failed, serving cover");
                return cover();
            }
        };
        if keys.is_empty() {
            return cover();
        }
        for key in &keys {
            let out = ChaCha20Poly1305::new(Key::from_slice(key)).decrypt(
                Nonce::from_slice(nonce),
                Payload { msg: ct, aad: fp_raw },
            );
            if let Ok(original) = out {
                return Unprotected::Original(original);
            }
        }
        tracing::warn!(image_fp = %fp_hex, viewer, "protected image failed authentication");
        self.tamper.lock().push(TamperEntry {
            at: Utc::now(),
            image_fp: fp_hex,
            viewer: viewer.to_string(),
        });
        cover()
    }

    pub fn tamper_log(&self) -> Vec<TamperEntry> {
        self.tamper.lock().clone()
    }
}

/// True when the bytes carry a stego header (no decryption attempted).
pub fn looks_protected(bytes: &[u8]) -> bool {
    image::load_from_memory(bytes)
        .map(|i| extract(&i.to_rgb8()).is_some())
        .unwrap_or(false)
}
