//! Radio and message transport model.
//!
//! RSSI follows a log-distance path loss law with optional seeded log-normal
//! shadowing. Link throughput is a step function of RSSI, and message delivery
//! time is `base_latency + size / throughput`, in order per (src, dst) pair.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RSSI_FLOOR_DBM: f64 = -120.0;
pub const RSSI_CEIL_DBM: f64 = -20.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("invalid link model: {0}")]
    InvalidLink(String),
    #[error("invalid throughput table: {0}")]
    InvalidTable(String),
    #[error("message size must be positive")]
    EmptyMessage,
}

/// Log-distance path loss parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkModel {
    /// Received power at the reference distance, dBm.
    #[serde(default = "LinkModel::default_p0")]
    pub p0: f64,
    #[serde(default = "LinkModel::default_exponent")]
    pub path_loss_exponent: f64,
    /// Reference distance, meters.
    #[serde(default = "LinkModel::default_d0")]
    pub d0: f64,
    /// Standard deviation of shadowing, dB. Zero disables shadowing.
    #[serde(default = "LinkModel::default_sigma")]
    pub shadowing_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl LinkModel {
    fn default_p0() -> f64 {
        -40.0
    }
    fn default_exponent() -> f64 {
        2.2
    }
    fn default_d0() -> f64 {
        1.0
    }
    fn default_sigma() -> f64 {
        2.0
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if !(1.5..=6.0).contains(&self.path_loss_exponent) {
            return Err(NetError::InvalidLink(format!(
                "path_loss_exponent {} outside [1.5, 6]",
                self.path_loss_exponent
            )));
        }
        if !(self.d0 > 0.0) {
            return Err(NetError::InvalidLink("d0 must be positive".into()));
        }
        if !(self.shadowing_sigma >= 0.0) || !self.p0.is_finite() {
            return Err(NetError::InvalidLink(
                "shadowing_sigma must be non-negative and p0 finite".into(),
            ));
        }
        Ok(())
    }

    pub fn without_shadowing(self) -> Self {
        Self {
            shadowing_sigma: 0.0,
            ..self
        }
    }
}

impl Default for LinkModel {
    fn default() -> Self {
        Self {
            p0: Self::default_p0(),
            path_loss_exponent: Self::default_exponent(),
            d0: Self::default_d0(),
            shadowing_sigma: Self::default_sigma(),
            seed: 0,
        }
    }
}

/// Position of a node at a point in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodePose {
    pub node_id: String,
    pub x: f64,
    pub y: f64,
    pub t: f64,
}

impl NodePose {
    pub fn new(node_id: impl Into<String>, x: f64, y: f64, t: f64) -> Self {
        Self {
            node_id: node_id.into(),
            x,
            y,
            t,
        }
    }

    pub fn distance_to(&self, other: &NodePose) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

// FNV-1a followed by a splitmix finalizer; stable across builds and platforms.
fn mix(seed: u64, parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for part in parts {
        for b in *part {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit_open(bits: u64) -> f64 {
    // (0, 1]: never zero so ln() stays finite
    ((bits >> 11) as f64 + 1.0) / (1u64 << 53) as f64
}

/// Standard-normal draw that depends only on the link seed, the unordered
/// node pair and the sample time.
fn shadow_draw(seed: u64, a: &NodePose, b: &NodePose) -> f64 {
    let (lo, hi) = if a.node_id <= b.node_id { (a, b) } else { (b, a) };
    let t = a.t.max(b.t).to_bits().to_le_bytes();
    let h1 = mix(seed, &[lo.node_id.as_bytes(), hi.node_id.as_bytes(), &t]);
    let h2 = splitmix(h1);
    let (u1, u2) = (unit_open(h1), unit_open(h2));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Received signal strength between two nodes, dBm.
///
/// Distances below `d0` are treated as `d0`. The result is clamped to
/// `[-120, -20]` dBm.
pub fn rssi_at(link: &LinkModel, src: &NodePose, dst: &NodePose) -> f64 {
    let d = src.distance_to(dst).max(link.d0);
    let mut rssi = link.p0 - 10.0 * link.path_loss_exponent * (d / link.d0).log10();
    if link.shadowing_sigma > 0.0 {
        rssi += link.shadowing_sigma * shadow_draw(link.seed, src, dst);
    }
    rssi.clamp(RSSI_FLOOR_DBM, RSSI_CEIL_DBM)
}

/// Step map from RSSI to link throughput.
///
/// `steps` are `(min_rssi_dbm, mbps)` pairs in descending RSSI order. Any RSSI
/// below every step but at or above `floor_dbm` gets `floor_mbps`; anything
/// below `floor_dbm` gets zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThroughputTable {
    pub steps: Vec<(f64, f64)>,
    pub floor_dbm: f64,
    pub floor_mbps: f64,
}

impl ThroughputTable {
    /// Default 802.11g-like table with the offloading floor at `nu`.
    pub fn with_floor(nu: f64) -> Self {
        Self {
            steps: vec![(-50.0, 54.0), (-60.0, 36.0), (-70.0, 18.0), (-80.0, 6.0)],
            floor_dbm: nu,
            floor_mbps: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let mut prev: Option<(f64, f64)> = None;
        for &(dbm, mbps) in &self.steps {
            if !dbm.is_finite() || !(mbps >= 0.0) {
                return Err(NetError::InvalidTable(format!("bad step ({dbm}, {mbps})")));
            }
            if let Some((pd, pm)) = prev {
                if dbm >= pd || mbps > pm {
                    return Err(NetError::InvalidTable(
                        "steps must be strictly descending in RSSI and non-increasing in rate"
                            .into(),
                    ));
                }
            }
            prev = Some((dbm, mbps));
        }
        if let Some((last_dbm, last_mbps)) = prev {
            if self.floor_dbm >= last_dbm || self.floor_mbps > last_mbps {
                return Err(NetError::InvalidTable(
                    "floor must sit below the last step".into(),
                ));
            }
        }
        if !(self.floor_mbps >= 0.0) {
            return Err(NetError::InvalidTable("floor_mbps must be non-negative".into()));
        }
        Ok(())
    }

    pub fn throughput_of(&self, rssi: f64) -> f64 {
        for &(dbm, mbps) in &self.steps {
            if rssi >= dbm {
                return mbps;
            }
        }
        if rssi >= self.floor_dbm {
            self.floor_mbps
        } else {
            0.0
        }
    }
}

impl Default for ThroughputTable {
    fn default() -> Self {
        Self::with_floor(-85.0)
    }
}

/// An inter-node message.
#[derive(Debug, Clone, PartialEq)]
pub struct Message<P> {
    pub src: String,
    pub dst: String,
    size: u64,
    pub created_at: f64,
    pub payload: P,
}

impl<P> Message<P> {
    pub fn new(
        src: impl Into<String>,
        dst: impl Into<String>,
        size: u64,
        created_at: f64,
        payload: P,
    ) -> Result<Self, NetError> {
        if size == 0 {
            return Err(NetError::EmptyMessage);
        }
        Ok(Self {
            src: src.into(),
            dst: dst.into(),
            size,
            created_at,
            payload,
        })
    }

    pub fn size(&self) -> u64 {
        self.size
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Delivery {
    Arrive { at: f64 },
    Drop,
}

/// Arrival time of a message sent at `now` over a link with the given RSSI.
pub fn deliver<P>(
    msg: &Message<P>,
    rssi: f64,
    now: f64,
    base_latency: f64,
    table: &ThroughputTable,
) -> Delivery {
    let mbps = table.throughput_of(rssi);
    if mbps <= 0.0 {
        return Delivery::Drop;
    }
    let bits = msg.size as f64 * 8.0;
    Delivery::Arrive {
        at: now + base_latency + bits / (mbps * 1e6),
    }
}

/// Stateful transport that keeps per-pair FIFO order on top of [`deliver`].
#[derive(Debug, Clone)]
pub struct Transport {
    pub table: ThroughputTable,
    pub base_latency: f64,
    last_arrival: BTreeMap<(String, String), f64>,
}

impl Transport {
    pub fn new(table: ThroughputTable, base_latency: f64) -> Self {
        Self {
            table,
            base_latency,
            last_arrival: BTreeMap::new(),
        }
    }

    pub fn send<P>(&mut self, msg: &Message<P>, rssi: f64, now: f64) -> Delivery {
        match deliver(msg, rssi, now, self.base_latency, &self.table) {
            Delivery::Drop => Delivery::Drop,
            Delivery::Arrive { at } => {
                let key = (msg.src.clone(), msg.dst.clone());
                let at = match self.last_arrival.get(&key) {
                    Some(&prev) if prev > at => prev,
                    _ => at,
                };
                self.last_arrival.insert(key, at);
                Delivery::Arrive { at }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_distance_gives_p0() {
        let link = LinkModel::default().without_shadowing();
        let a = NodePose::new("a", 0.0, 0.0, 0.0);
        let b = NodePose::new("b", 1.0, 0.0, 0.0);
        assert_eq!(rssi_at(&link, &a, &b), -40.0);
        // closer than d0 clamps to d0
        let c = NodePose::new("c", 0.1, 0.0, 0.0);
        assert_eq!(rssi_at(&link, &a, &c), -40.0);
    }

    #[test]
    fn ten_d0_with_exponent_two() {
        let link = LinkModel {
            p0: -40.0,
            path_loss_exponent: 2.0,
            d0: 1.0,
            shadowing_sigma: 0.0,
            seed: 0,
        };
        let a = NodePose::new("a", 0.0, 0.0, 0.0);
        let b = NodePose::new("b", 0.0, 10.0, 0.0);
        assert!((rssi_at(&link, &a, &b) + 60.0).abs() < 1e-12);
    }

    #[test]
    fn shadowing_is_deterministic_and_symmetric() {
        let link = LinkModel {
            seed: 9,
            ..LinkModel::default()
        };
        let a = NodePose::new("r1", 0.0, 0.0, 3.0);
        let b = NodePose::new("e2", 12.0, 5.0, 3.0);
        let first = rssi_at(&link, &a, &b);
        assert_eq!(first, rssi_at(&link, &a, &b));
        assert_eq!(first, rssi_at(&link, &b, &a));
        let other_seed = LinkModel { seed: 10, ..link };
        assert_ne!(first, rssi_at(&other_seed, &a, &b));
    }

    #[test]
    fn rssi_is_clamped() {
        let link = LinkModel::default().without_shadowing();
        let a = NodePose::new("a", 0.0, 0.0, 0.0);
        let far = NodePose::new("b", 1e9, 0.0, 0.0);
        assert_eq!(rssi_at(&link, &a, &far), RSSI_FLOOR_DBM);
        let hot = LinkModel {
            p0: 0.0,
            ..link
        };
        assert_eq!(rssi_at(&hot, &a, &a), RSSI_CEIL_DBM);
    }

    #[test]
    fn link_validation() {
        let bad = LinkModel {
            path_loss_exponent: 7.0,
            ..LinkModel::default()
        };
        assert!(bad.validate().is_err());
        let bad = LinkModel {
            d0: 0.0,
            ..LinkModel::default()
        };
        assert!(bad.validate().is_err());
        assert!(LinkModel::default().validate().is_ok());
    }

    #[test]
    fn default_table_lookup() {
        let t = ThroughputTable::default();
        assert_eq!(t.throughput_of(-45.0), 54.0);
        assert_eq!(t.throughput_of(-50.0), 54.0);
        assert_eq!(t.throughput_of(-75.0), 6.0);
        assert_eq!(t.throughput_of(-85.0), 1.0);
        assert_eq!(t.throughput_of(-95.0), 0.0);
        assert!(t.validate().is_ok());
    }

    #[test]
    fn table_validation_rejects_non_monotone() {
        let t = ThroughputTable {
            steps: vec![(-50.0, 6.0), (-60.0, 36.0)],
            floor_dbm: -85.0,
            floor_mbps: 1.0,
        };
        assert!(t.validate().is_err());
    }

    #[test]
    fn megabyte_at_six_mbps() {
        let msg = Message::new("r1", "e1", 1_000_000, 0.0, ()).unwrap();
        let t = ThroughputTable::default();
        match deliver(&msg, -75.0, 10.0, 0.005, &t) {
            Delivery::Arrive { at } => assert!((at - (10.0 + 0.005 + 8.0 / 6.0)).abs() < 1e-12),
            Delivery::Drop => panic!("unexpected drop"),
        }
        assert_eq!(deliver(&msg, -95.0, 10.0, 0.005, &t), Delivery::Drop);
    }

    #[test]
    fn zero_size_message_is_rejected() {
        assert_eq!(
            Message::new("a", "b", 0, 0.0, ()).unwrap_err(),
            NetError::EmptyMessage
        );
    }

    #[test]
    fn transport_preserves_pair_order() {
        let mut tr = Transport::new(ThroughputTable::default(), 0.001);
        let big = Message::new("r1", "e1", 10_000_000, 0.0, ()).unwrap();
        let small = Message::new("r1", "e1", 10, 0.1, ()).unwrap();
        let Delivery::Arrive { at: a1 } = tr.send(&big, -75.0, 0.0) else {
            panic!()
        };
        let Delivery::Arrive { at: a2 } = tr.send(&small, -45.0, 0.1) else {
            panic!()
        };
        assert!(a2 >= a1);
        // a different pair is unaffected
        let other = Message::new("r2", "e1", 10, 0.1, ()).unwrap();
        let Delivery::Arrive { at: a3 } = tr.send(&other, -45.0, 0.1) else {
            panic!()
        };
        assert!(a3 < a1);
    }
}
