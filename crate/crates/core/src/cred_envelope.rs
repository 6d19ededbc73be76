//! Sealing WiFi credentials for the covert channel.
//!
//! Credentials are encrypted with AES-128-CBC under a fresh IV, stamped
//! with a monotone global sequence number (epoch seconds) and
//! authenticated with HMAC-SHA256. The resulting byte string is framed
//! with a 2-byte length, padded to whole 7-byte blocks and spread over
//! `m` blocks of a k-of-m erasure code.

use aes::cipher::{block_padding::Pkcs7, BlockDecryptMut, BlockEncryptMut, KeyIvInit};
use hmac::{Hmac, Mac};
use rand::RngCore;
use sha2::Sha256;
use thiserror::Error;

use crate::covert_frame::{PayloadChunk, CHUNK_LEN, MAX_TOTAL};
use crate::fec::{CodeError, ErasureCode};

type Aes128CbcEnc = cbc::Encryptor<aes::Aes128>;
type Aes128CbcDec = cbc::Decryptor<aes::Aes128>;
type HmacSha256 = Hmac<Sha256>;

pub const MAX_SSID_LEN: usize = 32;
pub const MAX_PASSWORD_LEN: usize = 63;
pub const IV_LEN: usize = 16;
pub const MAC_LEN: usize = 32;
const SEQ_LEN: usize = 8;
const LENGTH_PREFIX: usize = 2;

/// Tolerated-loss table shipped with every deployment.
pub const DEFAULT_LOSS_TABLE: [f64; 4] = [0.6, 0.7, 0.8, 0.9];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvelopeError {
    #[error("ssid must be 1..={MAX_SSID_LEN} bytes and password at most {MAX_PASSWORD_LEN} bytes")]
    CredentialsTooLong,
    #[error("ssid must not be empty")]
    EmptySsid,
    #[error("message authentication failed")]
    AuthFailure,
    #[error("global sequence {seq} is not newer than {last}")]
    ReplayDetected { seq: u64, last: u64 },
    #[error("decrypted plaintext is malformed")]
    MalformedPlaintext,
    #[error("sealed message has an invalid layout")]
    MalformedMessage,
    #[error("{len}-byte message does not fit one exchange at loss index {loss_index}")]
    MessageTooLarge { len: usize, loss_index: u8 },
    #[error("only {have} distinct blocks, need {need}")]
    InsufficientBlocks { have: usize, need: usize },
    #[error("decoded length prefix {0} exceeds the block capacity")]
    CorruptLengthPrefix(usize),
    #[error("non-zero bytes after the framed message")]
    CorruptPadding,
    #[error("invalid erasure parameters: {0}")]
    InvalidParams(String),
    #[error("loss table must hold 4 strictly increasing fractions in (0,1)")]
    InvalidLossTable,
}

#[derive(Clone, PartialEq, Eq)]
pub struct Credentials {
    ssid: Vec<u8>,
    password: Vec<u8>,
}

impl std::fmt::Debug for Credentials {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Credentials")
            .field("ssid", &String::from_utf8_lossy(&self.ssid))
            .field("password", &"<redacted>")
            .finish()
    }
}

impl Credentials {
    pub fn new(ssid: impl Into<Vec<u8>>, password: impl Into<Vec<u8>>) -> Result<Self, EnvelopeError> {
        let (ssid, password) = (ssid.into(), password.into());
        if ssid.is_empty() {
            return Err(EnvelopeError::EmptySsid);
        }
        if ssid.len() > MAX_SSID_LEN || password.len() > MAX_PASSWORD_LEN {
            return Err(EnvelopeError::CredentialsTooLong);
        }
        Ok(Credentials { ssid, password })
    }

    pub fn ssid(&self) -> &[u8] {
        &self.ssid
    }

    pub fn password(&self) -> &[u8] {
        &self.password
    }

    /// `len(ssid) ssid len(password) password`
    fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 + self.ssid.len() + self.password.len());
        out.push(self.ssid.len() as u8);
        out.extend_from_slice(&self.ssid);
        out.push(self.password.len() as u8);
        out.extend_from_slice(&self.password);
        out
    }

    fn deserialize(bytes: &[u8]) -> Result<Self, EnvelopeError> {
        let (&ssid_len, rest) = bytes.split_first().ok_or(EnvelopeError::MalformedPlaintext)?;
        let ssid_len = ssid_len as usize;
        if rest.len() < ssid_len + 1 {
            return Err(EnvelopeError::MalformedPlaintext);
        }
        let (ssid, rest) = rest.split_at(ssid_len);
        let (&pw_len, password) = rest.split_first().ok_or(EnvelopeError::MalformedPlaintext)?;
        if password.len() != pw_len as usize {
            return Err(EnvelopeError::MalformedPlaintext);
        }
        Credentials::new(ssid, password).map_err(|_| EnvelopeError::MalformedPlaintext)
    }
}

/// Pre-shared keys loaded onto the gateway and every sensor.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyPair {
    pub enc_key: [u8; 16],
    pub mac_key: [u8; 32],
}

impl std::fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("KeyPair(<redacted>)")
    }
}

impl KeyPair {
    pub fn new(enc_key: [u8; 16], mac_key: [u8; 32]) -> Self {
        KeyPair { enc_key, mac_key }
    }

    pub fn generate<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        let mut k = KeyPair { enc_key: [0; 16], mac_key: [0; 32] };
        rng.fill_bytes(&mut k.enc_key);
        rng.fill_bytes(&mut k.mac_key);
        k
    }

    pub fn from_hex(enc: &str, mac: &str) -> Result<Self, hex::FromHexError> {
        let mut k = KeyPair { enc_key: [0; 16], mac_key: [0; 32] };
        hex::decode_to_slice(enc, &mut k.enc_key)?;
        hex::decode_to_slice(mac, &mut k.mac_key)?;
        Ok(k)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SealedMessage {
    pub iv: [u8; IV_LEN],
    pub global_seq: u64,
    pub ciphertext: Vec<u8>,
    pub mac: [u8; MAC_LEN],
}

impl SealedMessage {
    /// `iv(16) || global_seq(8, BE) || ciphertext || mac(32)`
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.wire_len());
        out.extend_from_slice(&self.iv);
        out.extend_from_slice(&self.global_seq.to_be_bytes());
        out.extend_from_slice(&self.ciphertext);
        out.extend_from_slice(&self.mac);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EnvelopeError> {
        let fixed = IV_LEN + SEQ_LEN + MAC_LEN;
        if bytes.len() < fixed + 16 || !(bytes.len() - fixed).is_multiple_of(16) {
            return Err(EnvelopeError::MalformedMessage);
        }
        let (iv, rest) = bytes.split_at(IV_LEN);
        let (seq, rest) = rest.split_at(SEQ_LEN);
        let (ciphertext, mac) = rest.split_at(rest.len() - MAC_LEN);
        Ok(SealedMessage {
            iv: iv.try_into().unwrap(),
            global_seq: u64::from_be_bytes(seq.try_into().unwrap()),
            ciphertext: ciphertext.to_vec(),
            mac: mac.try_into().unwrap(),
        })
    }

    pub fn wire_len(&self) -> usize {
        IV_LEN + SEQ_LEN + self.ciphertext.len() + MAC_LEN
    }
}

fn mac_for(keys: &KeyPair, iv: &[u8; IV_LEN], ciphertext: &[u8], seq: u64) -> HmacSha256 {
    let mut mac = HmacSha256::new_from_slice(&keys.mac_key).expect("hmac accepts any key length");
    mac.update(iv);
    mac.update(ciphertext);
    mac.update(&seq.to_be_bytes());
    mac
}

/// Seals under a caller-chosen IV. [`seal`] is the normal entry point.
pub fn seal_with_iv(creds: &Credentials, keys: &KeyPair, global_seq: u64, iv: [u8; IV_LEN]) -> SealedMessage {
    let ciphertext =
        Aes128CbcEnc::new(&keys.enc_key.into(), &iv.into()).encrypt_padded_vec_mut::<Pkcs7>(&creds.serialize());
    let mac = mac_for(keys, &iv, &ciphertext, global_seq).finalize().into_bytes().into();
    SealedMessage { iv, global_seq, ciphertext, mac }
}

pub fn seal<R: RngCore + ?Sized>(creds: &Credentials, keys: &KeyPair, now_epoch_seconds: u64, rng: &mut R) -> SealedMessage {
    let mut iv = [0u8; IV_LEN];
    rng.fill_bytes(&mut iv);
    seal_with_iv(creds, keys, now_epoch_seconds, iv)
}

/// Authenticates, checks freshness against `last_seq`, then decrypts.
/// On success the caller should raise its replay floor to `msg.global_seq`.
pub fn open(msg: &SealedMessage, keys: &KeyPair, last_seq: u64) -> Result<Credentials, EnvelopeError> {
    mac_for(keys, &msg.iv, &msg.ciphertext, msg.global_seq)
        .verify_slice(&msg.mac)
        .map_err(|_| EnvelopeError::AuthFailure)?;
    if msg.global_seq <= last_seq {
        return Err(EnvelopeError::ReplayDetected { seq: msg.global_seq, last: last_seq });
    }
    let plain = Aes128CbcDec::new(&keys.enc_key.into(), &msg.iv.into())
        .decrypt_padded_vec_mut::<Pkcs7>(&msg.ciphertext)
        .map_err(|_| EnvelopeError::MalformedPlaintext)?;
    Credentials::deserialize(&plain)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTable([f64; 4]);

impl Default for LossTable {
    fn default() -> Self {
        LossTable(DEFAULT_LOSS_TABLE)
    }
}

impl LossTable {
    pub fn new(values: [f64; 4]) -> Result<Self, EnvelopeError> {
        let in_range = values.iter().all(|v| *v > 0.0 && *v < 1.0);
        let increasing = values.windows(2).all(|w| w[0] < w[1]);
        if !in_range || !increasing {
            return Err(EnvelopeError::InvalidLossTable);
        }
        Ok(LossTable(values))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self, EnvelopeError> {
        let arr: [f64; 4] = values.try_into().map_err(|_| EnvelopeError::InvalidLossTable)?;
        Self::new(arr)
    }

    pub fn values(&self) -> [f64; 4] {
        self.0
    }

    pub fn get(&self, index: u8) -> Option<f64> {
        self.0.get(index as usize).copied()
    }

    /// Blocks needed to decode: `ceil((1 - loss) * m)`, computed in parts
    /// per million so that 0.7 and friends do not round up spuriously.
    pub fn k_for(&self, m: u8, loss_index: u8) -> usize {
        let loss = self.0[loss_index as usize & 0b11];
        let keep_ppm = 1_000_000 - (loss * 1_000_000.0).round() as u64;
        let k = (keep_ppm * m as u64).div_ceil(1_000_000);
        k.max(1) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FecParams {
    pub k: usize,
    pub m: u8,
    pub loss_index: u8,
}

impl FecParams {
    pub fn new(k: usize, m: u8, loss_index: u8) -> Result<Self, EnvelopeError> {
        if !(2..=MAX_TOTAL).contains(&m) || !m.is_multiple_of(2) {
            return Err(EnvelopeError::InvalidParams(format!("m={m} must be even in 2..={MAX_TOTAL}")));
        }
        if k == 0 || k > m as usize {
            return Err(EnvelopeError::InvalidParams(format!("k={k} must be in 1..={m}")));
        }
        if loss_index > 3 {
            return Err(EnvelopeError::InvalidParams(format!("loss index {loss_index} exceeds 3")));
        }
        Ok(FecParams { k, m, loss_index })
    }

    /// What a receiver derives from a frame header.
    pub fn from_header(m: u8, loss_index: u8, table: &LossTable) -> Result<Self, EnvelopeError> {
        Self::new(table.k_for(m, loss_index), m, loss_index)
    }

    /// Largest message these parameters can carry.
    pub fn capacity(&self) -> usize {
        self.k * CHUNK_LEN - LENGTH_PREFIX
    }
}

/// Smallest even `m` whose derived `k` leaves room for the message and
/// its length prefix.
pub fn fec_params(msg_len: usize, loss_index: u8, table: &LossTable) -> Result<FecParams, EnvelopeError> {
    if loss_index > 3 {
        return Err(EnvelopeError::InvalidParams(format!("loss index {loss_index} exceeds 3")));
    }
    (2..=MAX_TOTAL)
        .step_by(2)
        .map(|m| FecParams { k: table.k_for(m, loss_index), m, loss_index })
        .find(|p| p.k * CHUNK_LEN >= msg_len + LENGTH_PREFIX)
        .ok_or(EnvelopeError::MessageTooLarge { len: msg_len, loss_index })
}

fn code_for(p: &FecParams) -> Result<ErasureCode, EnvelopeError> {
    ErasureCode::new(p.k, p.m as usize).map_err(|e| EnvelopeError::InvalidParams(e.to_string()))
}

/// Splits `[len BE16][msg][zeros]` into `k` blocks and extends to `m`.
pub fn encode_blocks(msg: &[u8], p: &FecParams) -> Result<Vec<PayloadChunk>, EnvelopeError> {
    if msg.len() > p.capacity() || msg.len() > u16::MAX as usize {
        return Err(EnvelopeError::MessageTooLarge { len: msg.len(), loss_index: p.loss_index });
    }
    let mut framed = Vec::with_capacity(p.k * CHUNK_LEN);
    framed.extend_from_slice(&(msg.len() as u16).to_be_bytes());
    framed.extend_from_slice(msg);
    framed.resize(p.k * CHUNK_LEN, 0);
    let data: Vec<Vec<u8>> = framed.chunks(CHUNK_LEN).map(<[u8]>::to_vec).collect();
    let blocks = code_for(p)?.encode(&data).map_err(|e| EnvelopeError::InvalidParams(e.to_string()))?;
    Ok(blocks.iter().map(|b| PayloadChunk::try_from(b.as_slice()).expect("7-byte block")).collect())
}

pub fn decode_blocks(blocks: &[(usize, PayloadChunk)], p: &FecParams) -> Result<Vec<u8>, EnvelopeError> {
    let refs: Vec<(usize, &[u8])> = blocks.iter().map(|(i, c)| (*i, &c.0[..])).collect();
    let data = code_for(p)?.decode(&refs).map_err(|e| match e {
        CodeError::InsufficientBlocks { have, need } => EnvelopeError::InsufficientBlocks { have, need },
        other => EnvelopeError::InvalidParams(other.to_string()),
    })?;
    let framed: Vec<u8> = data.concat();
    let len = u16::from_be_bytes([framed[0], framed[1]]) as usize;
    if len > p.capacity() {
        return Err(EnvelopeError::CorruptLengthPrefix(len));
    }
    let end = LENGTH_PREFIX + len;
    if framed[end..].iter().any(|b| *b != 0) {
        return Err(EnvelopeError::CorruptPadding);
    }
    Ok(framed[LENGTH_PREFIX..end].to_vec())
}
