//! Independent oracles and fixtures shared by the integration tests and the
//! acceptance harness. Nothing here calls into the code under test except to
//! build inputs.
#![allow(dead_code)]

use std::net::Ipv4Addr;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cfdiag_core::pcap::{PacketRecord, SackBlock, TcpFlags, TcpOptionSet, Timestamp};
use cfdiag_core::svm::KernelSpec;

// ---------------------------------------------------------------------------
// L2-SVM dual, solved by enumerating support sets

fn kernel(k: &KernelSpec, a: &[f64], b: &[f64]) -> f64 {
    match *k {
        KernelSpec::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        KernelSpec::Rbf { gamma } => (-gamma * a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>()).exp(),
    }
}

/// Q_ij = y_i y_j (K_ij + δ_ij / 2C)
pub fn dual_hessian(x: &[Vec<f64>], y: &[f64], c: f64, k: &KernelSpec) -> Vec<Vec<f64>> {
    let n = x.len();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| y[i] * y[j] * (kernel(k, &x[i], &x[j]) + if i == j { 0.5 / c } else { 0.0 }))
                .collect()
        })
        .collect()
}

pub fn dual_value(q: &[Vec<f64>], alpha: &[f64]) -> f64 {
    let n = alpha.len();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += alpha[i] * q[i][j] * alpha[j];
        }
    }
    alpha.iter().sum::<f64>() - 0.5 * quad
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&r, &s| a[r][col].abs().total_cmp(&a[s][col].abs()))?;
        if a[piv][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        let (top, rest) = a.split_at_mut(col + 1);
        let pivot = &top[col];
        for (k, row) in rest.iter_mut().enumerate() {
            let f = row[col] / pivot[col];
            for (v, p) in row[col..].iter_mut().zip(&pivot[col..]) {
                *v -= f * p;
            }
            b[col + 1 + k] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

/// Maximum of Σα − ½αᵀQα subject to yᵀα = 0, α ≥ 0.
///
/// Q is positive definite, so the optimum is the stationary point of its own
/// support face; every feasible face stationary point is a lower bound. The
/// largest of them over all 2ⁿ − 1 faces is therefore the optimum.
pub fn brute_force_dual(x: &[Vec<f64>], y: &[f64], c: f64, k: &KernelSpec) -> (f64, Vec<f64>) {
    let n = x.len();
    let q = dual_hessian(x, y, c, k);
    let mut best = (0.0, vec![0.0; n]);
    for mask in 1u32..(1 << n) {
        let s: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
        let m = s.len();
        // [Q_SS y_S; y_Sᵀ 0] [α_S; ν] = [1; 0]
        let mut a = vec![vec![0.0; m + 1]; m + 1];
        let mut rhs = vec![1.0; m + 1];
        rhs[m] = 0.0;
        for (r, &i) in s.iter().enumerate() {
            for (cc, &j) in s.iter().enumerate() {
                a[r][cc] = q[i][j];
            }
            a[r][m] = y[i];
            a[m][r] = y[i];
        }
        let Some(sol) = solve_linear(a, rhs) else { continue };
        if sol[..m].iter().any(|&v| v < -1e-12) {
            continue;
        }
        let mut alpha = vec![0.0; n];
        for (r, &i) in s.iter().enumerate() {
            alpha[i] = sol[r].max(0.0);
        }
        let d = dual_value(&q, &alpha);
        if d > best.0 {
            best = (d, alpha);
        }
    }
    best
}

/// Random problem: 2..=5 points in 1..=3 dimensions with both labels present.
pub fn random_svm_problem(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<f64>, f64, KernelSpec) {
    let n = rng.random_range(2..=5);
    let d = rng.random_range(1..=3);
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect();
    let mut y: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect();
    y[0] = 1.0;
    y[1] = -1.0;
    let c = [0.1, 1.0, 10.0][rng.random_range(0..3)];
    let k = if rng.random_bool(0.5) {
        KernelSpec::Linear
    } else {
        KernelSpec::Rbf {
            gamma: [0.1, 0.5, 1.0, 2.0][rng.random_range(0..4)],
        }
    };
    (x, y, c, k)
}

/// Worst KKT violation of a full α vector: equality on the support set,
/// margin ≥ 1 elsewhere.
pub fn kkt_violation(x: &[Vec<f64>], y: &[f64], c: f64, k: &KernelSpec, alpha: &[f64], bias: f64) -> f64 {
    let n = x.len();
    (0..n)
        .map(|i| {
            let f: f64 = (0..n).map(|j| alpha[j] * y[j] * kernel(k, &x[j], &x[i])).sum::<f64>() + bias;
            let margin = y[i] * f;
            if alpha[i] > 0.0 {
                (margin - (1.0 - alpha[i] / (2.0 * c))).abs()
            } else {
                (1.0 - margin).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Planted-artifact signatures

pub const PLANTED: [usize; 2] = [17, 141];

/// 11 healthy and 11 faulty rows of 184 features. The fault shows up only in
/// the two `PLANTED` columns, and only jointly: both shift by ±μ with the
/// class, but two rows per class carry a nuisance of ±2μ that enters the
/// columns with opposite signs. Each column alone therefore has rows sitting
/// in the other class's cluster, while their sum separates the classes
/// exactly. The other 182 columns are noise with random scales.
pub fn planted_dataset(seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    const MU: f64 = 1.5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales: Vec<f64> = (0..184).map(|_| 10f64.powf(rng.random_range(-1.0..4.0))).collect();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..22 {
        let label = if i < 11 { -1.0 } else { 1.0 };
        let mut row: Vec<f64> = scales.iter().map(|s| s * rng.random_range(0.0..1.0)).collect();
        let nuisance = match i % 11 {
            0 => 2.0 * MU,
            1 => -2.0 * MU,
            _ => 0.0,
        };
        let [a, b] = PLANTED;
        row[a] = 50.0 + MU * label + nuisance + 0.1 * gaussian(&mut rng);
        row[b] = 7.0 + MU * label - nuisance + 0.1 * gaussian(&mut rng);
        x.push(row);
        y.push(label);
    }
    (x, y)
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box–Muller
    let u: f64 = rng.random_range(f64::EPSILON..1.0);
    let v: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
}

// ---------------------------------------------------------------------------
// Packets

pub const CLIENT: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 1);
pub const SERVER: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 2);

/// Hand-built client-side trace used for the golden pcap fixture.
pub fn golden_packets() -> Vec<PacketRecord> {
    let c = (CLIENT, 40001);
    let s = (SERVER, 80);
    let ts = |us: u64| Timestamp::from_micros(1_600_000_000_000_000 + us);
    let ack = TcpFlags::ACK;
    let syn_opts = TcpOptionSet {
        mss: Some(1460),
        window_scale: Some(7),
        sack_permitted: true,
        sack_blocks: vec![],
        timestamps: Some((100, 0)),
    };
    let ts_only = |val, ecr| TcpOptionSet {
        timestamps: Some((val, ecr)),
        ..Default::default()
    };
    vec![
        PacketRecord::new(ts(0), c, s, 1000, 0, TcpFlags::SYN, 64240, 0, syn_opts.clone()),
        PacketRecord::new(
            ts(20_011),
            s,
            c,
            9000,
            1001,
            TcpFlags::SYN | ack,
            65160,
            0,
            TcpOptionSet {
                timestamps: Some((700, 100)),
                ..syn_opts
            },
        ),
        PacketRecord::new(ts(20_050), c, s, 1001, 9001, ack, 502, 0, ts_only(120, 700)),
        PacketRecord::new(
            ts(20_090),
            c,
            s,
            1001,
            9001,
            ack | TcpFlags::PSH,
            502,
            120,
            ts_only(120, 700),
        ),
        PacketRecord::new(ts(40_200), s, c, 9001, 1121, ack, 509, 1448, ts_only(720, 120)),
        PacketRecord::new(ts(40_350), s, c, 11897, 1121, ack, 509, 1448, ts_only(720, 120)),
        PacketRecord::new(
            ts(40_360),
            c,
            s,
            1121,
            10449,
            ack,
            502,
            0,
            TcpOptionSet {
                sack_blocks: vec![SackBlock::new(11897, 13345)],
                timestamps: Some((140, 720)),
                ..Default::default()
            },
        ),
        PacketRecord::new(
            ts(60_400),
            s,
            c,
            10449,
            1121,
            ack | TcpFlags::PSH,
            509,
            1448,
            ts_only(740, 140),
        ),
        PacketRecord::new(ts(60_410), c, s, 1121, 13345, ack, 502, 0, ts_only(160, 740)),
        PacketRecord::new(
            ts(60_500),
            s,
            c,
            13345,
            1121,
            ack | TcpFlags::FIN,
            509,
            0,
            ts_only(741, 160),
        ),
        PacketRecord::new(
            ts(60_520),
            c,
            s,
            1121,
            13346,
            ack | TcpFlags::FIN,
            502,
            0,
            ts_only(161, 741),
        ),
        PacketRecord::new(ts(80_600), s, c, 13346, 1122, ack, 509, 0, ts_only(760, 161)),
    ]
}

fn arb_options() -> impl Strategy<Value = TcpOptionSet> {
    (
        proptest::option::of(any::<u16>()),
        proptest::option::of(0u8..=14),
        any::<bool>(),
        proptest::collection::vec((any::<u32>(), any::<u32>()), 0..=4),
        proptest::option::of((any::<u32>(), any::<u32>())),
    )
        .prop_map(|(mss, window_scale, sack_permitted, blocks, timestamps)| {
            let mut o = TcpOptionSet {
                mss,
                window_scale,
                sack_permitted,
                sack_blocks: blocks.into_iter().map(|(l, r)| SackBlock::new(l, r)).collect(),
                timestamps,
            };
            // the option region holds at most 40 bytes
            while o.encoded_len() > 40 {
                o.sack_blocks.pop();
            }
            o
        })
}

prop_compose! {
    pub fn arb_packet()(
        secs in any::<u32>(),
        micros in 0u32..1_000_000,
        src in any::<[u8; 4]>(),
        dst in any::<[u8; 4]>(),
        ports in any::<(u16, u16)>(),
        seq in any::<u32>(),
        ack in any::<u32>(),
        flags in 0u8..0x40,
        window in any::<u16>(),
        payload_len in prop_oneof![Just(0u32), 1u32..1500, 1500u32..9000],
        options in arb_options(),
        truncate in proptest::option::of(any::<proptest::sample::Index>()),
    ) -> PacketRecord {
        let p = PacketRecord::new(
            Timestamp::new(secs, micros),
            (Ipv4Addr::from(src), ports.0),
            (Ipv4Addr::from(dst), ports.1),
            seq,
            ack,
            TcpFlags::from_bits_truncate(flags),
            window,
            payload_len,
            options,
        );
        match truncate {
            // anything from headers-only to the full frame
            Some(ix) => {
                let span = p.original_len as usize - p.headers_len() + 1;
                let snap = p.headers_len() + ix.index(span);
                p.with_snaplen(snap as u32)
            }
            None => p,
        }
    }
}

/// Hand-written conversation, 1 ms between packets, client 10.0.0.1:40001.
#[derive(Default)]
pub struct Conversation {
    pub packets: Vec<PacketRecord>,
}

impl Conversation {
    #[allow(clippy::too_many_arguments)]
    pub fn push(
        &mut self,
        from_client: bool,
        seq: u32,
        ack: u32,
        flags: TcpFlags,
        win: u16,
        len: u32,
        opts: TcpOptionSet,
    ) -> &mut Self {
        let (c, s) = ((CLIENT, 40001), (SERVER, 80));
        let (src, dst) = if from_client { (c, s) } else { (s, c) };
        let ts = Timestamp::from_micros(1_000_000 + 1000 * self.packets.len() as u64);
        self.packets
            .push(PacketRecord::new(ts, src, dst, seq, ack, flags, win, len, opts));
        self
    }

    pub fn client(&mut self, seq: u32, ack: u32, flags: TcpFlags, len: u32) -> &mut Self {
        self.push(true, seq, ack, flags, 8000, len, TcpOptionSet::default())
    }

    pub fn server(&mut self, seq: u32, ack: u32, flags: TcpFlags, len: u32) -> &mut Self {
        self.push(false, seq, ack, flags, 8000, len, TcpOptionSet::default())
    }

    /// Client ISN 0, server ISN 5000, SACK permitted both ways.
    pub fn handshake(&mut self) -> &mut Self {
        let opts = TcpOptionSet {
            mss: Some(1460),
            sack_permitted: true,
            ..Default::default()
        };
        self.push(true, 0, 0, TcpFlags::SYN, 8000, 0, opts.clone());
        self.push(false, 5000, 1, TcpFlags::SYN | TcpFlags::ACK, 8000, 0, opts);
        self.client(1, 5001, TcpFlags::ACK, 0)
    }
}
