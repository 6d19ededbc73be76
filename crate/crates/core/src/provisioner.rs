//! Gateway broadcaster and sensor listener for covert-channel provisioning.
//!
//! The gateway repeats the sealed credentials in rounds. Each round uses a
//! fresh IV and global sequence number and the opposite send flag, and
//! every `escalation_period` rounds the gateway moves one step up the loss
//! table so that sensors with poor reception eventually get enough blocks.
//! Sensors scan channels, keep only frames carrying their pairing id,
//! collect one round's blocks and open the message once `k` have arrived.

use std::collections::{BTreeMap, BTreeSet};

use rand::RngCore;
use thiserror::Error;

use crate::covert_frame::{build_frame, parse_frame, CovertFrame, FrameError, FrameHeader, PayloadChunk, MAX_ID};
use crate::cred_envelope::{
    decode_blocks, encode_blocks, fec_params, open, seal, Credentials, EnvelopeError, FecParams, KeyPair, LossTable,
    SealedMessage,
};

pub const CHANNELS: u8 = 11;
pub const DEFAULT_ESCALATION_PERIOD: u32 = 5;
pub const DEFAULT_DWELL_SECONDS: u64 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProvisionError {
    #[error(transparent)]
    Envelope(#[from] EnvelopeError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("sensor {0:?} is not expected in this deployment")]
    UnknownSensor(String),
    #[error("invalid provisioning setting: {0}")]
    InvalidSetting(&'static str),
}

/// One broadcast exchange.
#[derive(Debug, Clone)]
pub struct Round {
    /// 1-based.
    pub number: u64,
    pub global_seq: u64,
    pub flag: bool,
    pub params: FecParams,
    pub frames: Vec<CovertFrame>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProvisionStatus {
    pub connected: usize,
    pub expected: usize,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct GatewayProvisionState {
    keys: KeyPair,
    id: u8,
    table: LossTable,
    loss_index: u8,
    flag: bool,
    last_global_seq: u64,
    expected: BTreeSet<String>,
    connected: BTreeSet<String>,
    rounds_sent: u64,
    escalation_period: u32,
}

impl GatewayProvisionState {
    pub fn new(
        keys: KeyPair,
        id: u8,
        table: LossTable,
        escalation_period: u32,
        expected: impl IntoIterator<Item = impl Into<String>>,
    ) -> Result<Self, ProvisionError> {
        if id > MAX_ID {
            return Err(ProvisionError::InvalidSetting("id must be at most 63"));
        }
        if escalation_period == 0 {
            return Err(ProvisionError::InvalidSetting("escalation period must be positive"));
        }
        Ok(GatewayProvisionState {
            keys,
            id,
            table,
            loss_index: 0,
            flag: false,
            last_global_seq: 0,
            expected: expected.into_iter().map(Into::into).collect(),
            connected: BTreeSet::new(),
            rounds_sent: 0,
            escalation_period,
        })
    }

    pub fn loss_index(&self) -> u8 {
        self.loss_index
    }

    pub fn rounds_sent(&self) -> u64 {
        self.rounds_sent
    }

    pub fn flag(&self) -> bool {
        self.flag
    }

    pub fn connected(&self) -> &BTreeSet<String> {
        &self.connected
    }

    pub fn status(&self) -> ProvisionStatus {
        ProvisionStatus {
            connected: self.connected.len(),
            expected: self.expected.len(),
            done: self.connected.len() == self.expected.len(),
        }
    }

    /// Seals and packetizes one round, then toggles the flag and escalates
    /// on schedule. If the credentials do not fit the current loss index
    /// the highest index that does fit is used for this round.
    pub fn emit_round<R: RngCore + ?Sized>(
        &mut self,
        creds: &Credentials,
        now: u64,
        rng: &mut R,
    ) -> Result<Round, ProvisionError> {
        let global_seq = if now > self.last_global_seq { now } else { self.last_global_seq + 1 };
        let wire = seal(creds, &self.keys, global_seq, rng).to_bytes();

        let mut index = self.loss_index;
        let params = loop {
            match fec_params(wire.len(), index, &self.table) {
                Ok(p) => break p,
                Err(EnvelopeError::MessageTooLarge { .. }) if index > 0 => index -= 1,
                Err(e) => return Err(e.into()),
            }
        };

        let frames = encode_blocks(&wire, &params)?
            .iter()
            .enumerate()
            .map(|(seq, chunk)| {
                let header = FrameHeader::new(self.id, self.flag, params.loss_index, params.m, seq as u8)?;
                Ok(build_frame(header.pack()?, chunk))
            })
            .collect::<Result<Vec<_>, FrameError>>()?;

        let round = Round { number: self.rounds_sent + 1, global_seq, flag: self.flag, params, frames };
        self.last_global_seq = global_seq;
        self.flag = !self.flag;
        self.rounds_sent += 1;
        if self.rounds_sent.is_multiple_of(u64::from(self.escalation_period)) && self.loss_index < 3 {
            self.loss_index += 1;
        }
        Ok(round)
    }

    /// Idempotent. `done` tells the caller it may stop broadcasting.
    pub fn note_connected(&mut self, sensor: &str) -> Result<ProvisionStatus, ProvisionError> {
        if !self.expected.contains(sensor) {
            return Err(ProvisionError::UnknownSensor(sensor.to_string()));
        }
        self.connected.insert(sensor.to_string());
        Ok(self.status())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProvisionEvent {
    Ignored,
    Buffered(usize),
    CredentialsRecovered(Credentials),
    AuthFailure,
    ReplayDetected,
    DecodeFailed,
}

impl ProvisionEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            ProvisionEvent::Ignored => "ignored",
            ProvisionEvent::Buffered(_) => "buffered",
            ProvisionEvent::CredentialsRecovered(_) => "credentials_recovered",
            ProvisionEvent::AuthFailure => "auth_failure",
            ProvisionEvent::ReplayDetected => "replay_detected",
            ProvisionEvent::DecodeFailed => "decode_failed",
        }
    }
}

/// `ts=<seconds> sensor=<name> event=<kind>`
pub fn event_line(ts: u64, sensor: &str, event: &ProvisionEvent) -> String {
    format!("ts={ts} sensor={sensor} event={}", event.kind())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct RoundKey {
    flag: bool,
    m: u8,
    loss_index: u8,
}

#[derive(Debug, Clone)]
pub struct SensorProvisionState {
    name: String,
    keys: KeyPair,
    id: u8,
    table: LossTable,
    last_seq: u64,
    current: Option<RoundKey>,
    buffer: BTreeMap<u8, PayloadChunk>,
    /// The round that produced the last accepted or replayed message.
    settled: Option<RoundKey>,
    dwell: u64,
    locked_channel: Option<u8>,
    recovered: Option<Credentials>,
}

impl SensorProvisionState {
    pub fn new(name: impl Into<String>, keys: KeyPair, id: u8, table: LossTable, dwell: u64) -> Self {
        SensorProvisionState {
            name: name.into(),
            keys,
            id,
            table,
            last_seq: 0,
            current: None,
            buffer: BTreeMap::new(),
            settled: None,
            dwell: dwell.max(1),
            locked_channel: None,
            recovered: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn last_seq(&self) -> u64 {
        self.last_seq
    }

    pub fn recovered(&self) -> Option<&Credentials> {
        self.recovered.as_ref()
    }

    pub fn buffered(&self) -> usize {
        self.buffer.len()
    }

    /// Stop scanning and stay on `channel`.
    pub fn lock_channel(&mut self, channel: u8) {
        self.locked_channel = Some(channel);
    }

    /// Channel to listen on at `now`: channels 1..=11 round robin, `dwell`
    /// seconds each, unless locked.
    pub fn scan_step(&self, now: u64) -> u8 {
        self.locked_channel.unwrap_or_else(|| 1 + ((now / self.dwell) % u64::from(CHANNELS)) as u8)
    }

    pub fn ingest(&mut self, frame: &CovertFrame, _now: u64) -> ProvisionEvent {
        let Ok((header, chunk)) = parse_frame(frame, self.id) else {
            return ProvisionEvent::Ignored;
        };
        let key = RoundKey { flag: header.flag, m: header.total, loss_index: header.fec_index };
        if self.settled == Some(key) {
            return ProvisionEvent::Ignored;
        }
        if self.current != Some(key) {
            self.buffer.clear();
            self.current = Some(key);
            self.settled = None;
        }
        self.buffer.entry(header.seq).or_insert(chunk);

        let Ok(params) = FecParams::from_header(key.m, key.loss_index, &self.table) else {
            self.buffer.clear();
            return ProvisionEvent::DecodeFailed;
        };
        if self.buffer.len() < params.k {
            return ProvisionEvent::Buffered(self.buffer.len());
        }

        let blocks: Vec<(usize, PayloadChunk)> = self.buffer.iter().map(|(s, c)| (*s as usize, *c)).collect();
        self.buffer.clear();
        let sealed = match decode_blocks(&blocks, &params).and_then(|b| SealedMessage::from_bytes(&b)) {
            Ok(s) => s,
            Err(_) => return ProvisionEvent::DecodeFailed,
        };
        match open(&sealed, &self.keys, self.last_seq) {
            Ok(creds) => {
                self.last_seq = sealed.global_seq;
                self.settled = Some(key);
                self.current = None;
                self.recovered = Some(creds.clone());
                ProvisionEvent::CredentialsRecovered(creds)
            }
            Err(EnvelopeError::AuthFailure) => ProvisionEvent::AuthFailure,
            Err(EnvelopeError::ReplayDetected { .. }) => {
                self.settled = Some(key);
                self.current = None;
                ProvisionEvent::ReplayDetected
            }
            Err(_) => ProvisionEvent::DecodeFailed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{seq::SliceRandom, Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const T0: u64 = 1_700_000_000;

    fn keys() -> KeyPair {
        KeyPair::new([7; 16], [9; 32])
    }

    fn creds() -> Credentials {
        Credentials::new("Home", "secret123").unwrap()
    }

    fn gateway(period: u32) -> GatewayProvisionState {
        GatewayProvisionState::new(keys(), 12, LossTable::default(), period, ["a", "b"]).unwrap()
    }

    fn sensor() -> SensorProvisionState {
        SensorProvisionState::new("a", keys(), 12, LossTable::default(), 5)
    }

    #[test]
    fn flag_alternates_and_headers_agree() {
        let mut gw = gateway(5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r1 = gw.emit_round(&creds(), T0, &mut rng).unwrap();
        let r2 = gw.emit_round(&creds(), T0 + 1, &mut rng).unwrap();
        for (round, flag) in [(&r1, false), (&r2, true)] {
            assert_eq!(round.frames.len(), round.params.m as usize);
            for (i, f) in round.frames.iter().enumerate() {
                let (h, _) = f.decode().unwrap();
                assert_eq!((h.flag, h.fec_index, h.total, h.seq as usize), (flag, 0, round.params.m, i));
            }
        }
    }

    #[test]
    fn escalation_every_period() {
        let mut gw = gateway(5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut seen = Vec::new();
        for r in 0..25 {
            let round = gw.emit_round(&creds(), T0 + r, &mut rng).unwrap();
            seen.push(round.params.loss_index);
        }
        let expected: Vec<u8> = (0..25).map(|r| (r / 5).min(3) as u8).collect();
        assert_eq!(seen, expected);
        assert_eq!(gw.loss_index(), 3);
    }

    #[test]
    fn global_seq_strictly_increases_even_with_stalled_clock() {
        let mut gw = gateway(5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = gw.emit_round(&creds(), T0, &mut rng).unwrap();
        let b = gw.emit_round(&creds(), T0, &mut rng).unwrap();
        let c = gw.emit_round(&creds(), T0 - 10, &mut rng).unwrap();
        assert_eq!((a.global_seq, b.global_seq, c.global_seq), (T0, T0 + 1, T0 + 2));
    }

    #[test]
    fn oversized_credentials_fall_back_to_a_fitting_index() {
        let big = Credentials::new(vec![b's'; 32], vec![b'p'; 63]).unwrap();
        let mut gw = gateway(1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let indices: Vec<u8> =
            (0..5).map(|r| gw.emit_round(&big, T0 + r, &mut rng).unwrap().params.loss_index).collect();
        assert_eq!(indices, [0, 1, 2, 2, 2]);
        assert_eq!(gw.loss_index(), 3);
    }

    #[test]
    fn exchanges_never_exceed_126_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let ssid: Vec<u8> = (0..rng.gen_range(1..=32)).map(|_| rng.gen()).collect();
            let pw: Vec<u8> = (0..rng.gen_range(0..=63)).map(|_| rng.gen()).collect();
            let c = Credentials::new(ssid, pw).unwrap();
            let mut gw = gateway(1);
            for r in 0..6 {
                let round = gw.emit_round(&c, T0 + r, &mut rng).unwrap();
                assert!(round.params.m <= 126 && round.params.m.is_multiple_of(2));
                assert_eq!(round.frames.len(), round.params.m as usize);
            }
        }
    }

    #[test]
    fn connect_notifications() {
        let mut gw = gateway(5);
        assert!(!gw.note_connected("a").unwrap().done);
        assert!(!gw.note_connected("a").unwrap().done);
        assert_eq!(gw.note_connected("b").unwrap(), ProvisionStatus { connected: 2, expected: 2, done: true });
        assert_eq!(gw.note_connected("c"), Err(ProvisionError::UnknownSensor("c".into())));
    }

    #[test]
    fn scan_schedule() {
        let s = sensor();
        assert_eq!(s.scan_step(0), 1);
        assert_eq!(s.scan_step(5), 2);
        assert_eq!(s.scan_step(54), 11);
        assert_eq!(s.scan_step(55), 1);
        for t in 0..200 {
            assert_eq!(s.scan_step(t), s.scan_step(t + 55));
        }
        let mut locked = sensor();
        locked.lock_channel(6);
        assert_eq!(locked.scan_step(0), 6);
    }

    #[test]
    fn loss_free_round_recovers_at_kth_chunk() {
        let mut gw = gateway(5);
        let mut s = sensor();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let round = gw.emit_round(&creds(), T0, &mut rng).unwrap();
        let k = round.params.k;
        for (i, f) in round.frames.iter().enumerate() {
            let ev = s.ingest(f, T0);
            if i + 1 < k {
                assert_eq!(ev, ProvisionEvent::Buffered(i + 1));
            } else if i + 1 == k {
                assert_eq!(ev, ProvisionEvent::CredentialsRecovered(creds()));
            } else {
                assert_eq!(ev, ProvisionEvent::Ignored);
            }
        }
        assert_eq!(s.last_seq(), T0);
    }

    #[test]
    fn tolerated_drop_still_recovers() {
        let table = LossTable::default();
        for seed in 0..30 {
            let mut gw = gateway(5);
            let mut s = sensor();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let round = gw.emit_round(&creds(), T0, &mut rng).unwrap();
            let m = round.params.m as usize;
            let dropped = (table.values()[0] * m as f64).floor() as usize;
            let mut order: Vec<usize> = (0..m).collect();
            order.shuffle(&mut rng);
            let survivors = &order[dropped..];
            let events: Vec<_> = survivors.iter().map(|&i| s.ingest(&round.frames[i], T0)).collect();
            assert!(events.contains(&ProvisionEvent::CredentialsRecovered(creds())), "seed {seed}");
        }
    }

    #[test]
    fn replayed_prior_round_is_detected() {
        let mut gw = gateway(5);
        let mut s = sensor();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let first = gw.emit_round(&creds(), T0, &mut rng).unwrap();
        let second = gw.emit_round(&creds(), T0 + 1, &mut rng).unwrap();
        let got: Vec<_> = second.frames.iter().map(|f| s.ingest(f, T0 + 1)).collect();
        assert!(got.contains(&ProvisionEvent::CredentialsRecovered(creds())));
        let replay: Vec<_> = first.frames.iter().map(|f| s.ingest(f, T0 + 2)).collect();
        assert!(replay.contains(&ProvisionEvent::ReplayDetected));
        assert!(!replay.iter().any(|e| matches!(e, ProvisionEvent::CredentialsRecovered(_))));
    }

    #[test]
    fn replaying_the_accepted_round_never_recovers_twice() {
        let mut gw = gateway(5);
        let mut s = sensor();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let round = gw.emit_round(&creds(), T0, &mut rng).unwrap();
        for f in &round.frames {
            s.ingest(f, T0);
        }
        for f in &round.frames {
            assert!(!matches!(s.ingest(f, T0 + 5), ProvisionEvent::CredentialsRecovered(_)));
        }
    }

    #[test]
    fn wrong_keys_never_recover() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut gw = gateway(2);
        let mut s = SensorProvisionState::new("a", KeyPair::generate(&mut rng), 12, LossTable::default(), 5);
        for r in 0..10 {
            let round = gw.emit_round(&creds(), T0 + r, &mut rng).unwrap();
            for f in &round.frames {
                let ev = s.ingest(f, T0 + r);
                assert!(!matches!(ev, ProvisionEvent::CredentialsRecovered(_)));
            }
        }
        for _ in 0..20_000 {
            let mut raw: [u8; 12] = rng.gen();
            raw[0] = (12 << 2) | 0b10;
            raw[6] = 0x33;
            raw[7] = 0x33;
            let ev = s.ingest(&CovertFrame::from_bytes(raw), T0);
            assert!(!matches!(ev, ProvisionEvent::CredentialsRecovered(_)));
        }
    }

    #[test]
    fn interleaved_rounds_never_mix() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let mut gw = gateway(5);
            let a = gw.emit_round(&creds(), T0, &mut rng).unwrap();
            let b = gw.emit_round(&creds(), T0 + 1, &mut rng).unwrap();
            let mut all: Vec<&CovertFrame> = a.frames.iter().chain(b.frames.iter()).collect();
            all.shuffle(&mut rng);
            let mut s = sensor();
            for f in all {
                let ev = s.ingest(f, T0 + 1);
                assert!(
                    !matches!(ev, ProvisionEvent::AuthFailure | ProvisionEvent::DecodeFailed),
                    "a decode drew chunks from two rounds"
                );
            }
        }
    }

    #[test]
    fn event_lines() {
        assert_eq!(event_line(42, "dylos-1", &ProvisionEvent::Buffered(3)), "ts=42 sensor=dylos-1 event=buffered");
        assert_eq!(event_line(0, "s", &ProvisionEvent::ReplayDetected), "ts=0 sensor=s event=replay_detected");
    }
}
