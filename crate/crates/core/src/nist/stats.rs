//! The individual statistical tests. Each takes unpacked bits (one 0/1
//! value per byte) and explicit parameters, and performs no length policing;
//! [`super::run_test`] applies the published minimums and defaults.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use statrs::function::erf::erfc;
use statrs::function::gamma::{gamma_ur, ln_gamma};

/// Upper regularized incomplete gamma, total over the whole half line.
pub fn igamc(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else if x.is_infinite() {
        0.0
    } else {
        gamma_ur(a, x)
    }
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Raw result of one test: p-values plus named statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub p_values: Vec<f64>,
    pub detail: Vec<(String, f64)>,
}

impl Outcome {
    fn new(p_values: Vec<f64>) -> Self {
        let p_values = p_values.into_iter().map(|p| p.clamp(0.0, 1.0)).collect();
        Self {
            p_values,
            detail: Vec::new(),
        }
    }

    fn with(mut self, name: &str, value: f64) -> Self {
        self.detail.push((name.to_string(), value));
        self
    }

    pub fn stat(&self, name: &str) -> Option<f64> {
        self.detail.iter().find(|(k, _)| k == name).map(|&(_, v)| v)
    }
}

fn chi_square(observed: &[f64], probs: &[f64], total: f64) -> f64 {
    observed
        .iter()
        .zip(probs)
        .map(|(&v, &p)| (v - total * p).powi(2) / (total * p))
        .sum()
}

pub fn frequency(bits: &[u8]) -> Outcome {
    let n = bits.len() as f64;
    let s: i64 = bits.iter().map(|&b| 2 * i64::from(b) - 1).sum();
    let s_obs = (s as f64).abs() / n.sqrt();
    Outcome::new(vec![erfc(s_obs / std::f64::consts::SQRT_2)])
        .with("sum", s as f64)
        .with("s_obs", s_obs)
}

pub fn block_frequency(bits: &[u8], m: usize) -> Outcome {
    let blocks = bits.len() / m;
    let chi2: f64 = 4.0
        * m as f64
        * bits
            .chunks_exact(m)
            .map(|c| {
                let pi = c.iter().map(|&b| f64::from(b)).sum::<f64>() / m as f64;
                (pi - 0.5).powi(2)
            })
            .sum::<f64>();
    Outcome::new(vec![igamc(blocks as f64 / 2.0, chi2 / 2.0)])
        .with("M", m as f64)
        .with("blocks", blocks as f64)
        .with("chi2", chi2)
}

pub fn runs(bits: &[u8]) -> Outcome {
    let n = bits.len() as f64;
    let pi = bits.iter().map(|&b| f64::from(b)).sum::<f64>() / n;
    let tau = 2.0 / n.sqrt();
    if (pi - 0.5).abs() >= tau {
        return Outcome::new(vec![0.0]).with("pi", pi).with("frequency_prerequisite_failed", 1.0);
    }
    let v = 1 + bits.windows(2).filter(|w| w[0] != w[1]).count();
    let v = v as f64;
    let num = (v - 2.0 * n * pi * (1.0 - pi)).abs();
    let den = 2.0 * (2.0 * n).sqrt() * pi * (1.0 - pi);
    Outcome::new(vec![erfc(num / den)]).with("pi", pi).with("runs", v)
}

/// Block size, class bounds (`<= lo`, ..., `>= hi`) and class probabilities.
fn longest_run_table(n: usize) -> (usize, usize, usize, &'static [f64]) {
    if n >= 750_000 {
        (10_000, 10, 16, &[0.0882, 0.2092, 0.2483, 0.1933, 0.1208, 0.0675, 0.0727])
    } else if n >= 6272 {
        (128, 4, 9, &[0.1174, 0.2430, 0.2493, 0.1752, 0.1027, 0.1124])
    } else {
        (8, 1, 4, &[0.2148, 0.3672, 0.2305, 0.1875])
    }
}

pub fn longest_run(bits: &[u8]) -> Outcome {
    let (m, lo, hi, probs) = longest_run_table(bits.len());
    let blocks = bits.len() / m;
    let mut counts = vec![0.0; probs.len()];
    for block in bits.chunks_exact(m) {
        let (mut run, mut best) = (0usize, 0usize);
        for &b in block {
            run = if b == 1 { run + 1 } else { 0 };
            best = best.max(run);
        }
        counts[best.clamp(lo, hi) - lo] += 1.0;
    }
    let chi2 = chi_square(&counts, probs, blocks as f64);
    let k = (probs.len() - 1) as f64;
    Outcome::new(vec![igamc(k / 2.0, chi2 / 2.0)])
        .with("M", m as f64)
        .with("blocks", blocks as f64)
        .with("chi2", chi2)
}

/// Rank over GF(2) of a matrix given as rows of packed bits.
pub fn gf2_rank(rows: &mut [u64]) -> usize {
    let mut rank = 0;
    for bit in (0..64).rev() {
        let mask = 1u64 << bit;
        let Some(pivot) = (rank..rows.len()).find(|&r| rows[r] & mask != 0) else {
            continue;
        };
        rows.swap(rank, pivot);
        let p = rows[rank];
        for (r, row) in rows.iter_mut().enumerate() {
            if r != rank && *row & mask != 0 {
                *row ^= p;
            }
        }
        rank += 1;
    }
    rank
}

/// Probability that a random `rows x cols` binary matrix has rank `r`.
pub fn rank_probability(r: usize, rows: usize, cols: usize) -> f64 {
    let (m, q) = (rows as f64, cols as f64);
    let rf = r as f64;
    let mut p = (rf * (q + m - rf) - m * q).exp2();
    for i in 0..r {
        let i = i as f64;
        p *= (1.0 - (i - q).exp2()) * (1.0 - (i - m).exp2()) / (1.0 - (i - rf).exp2());
    }
    p
}

pub fn rank(bits: &[u8], rows: usize, cols: usize) -> Outcome {
    let size = rows * cols;
    let blocks = bits.len() / size;
    let full = rows.min(cols);
    let (mut f_full, mut f_minus) = (0.0, 0.0);
    let mut matrix = vec![0u64; rows];
    for block in bits.chunks_exact(size) {
        for (r, row) in block.chunks_exact(cols).enumerate() {
            matrix[r] = row.iter().fold(0u64, |acc, &b| (acc << 1) | u64::from(b));
        }
        match gf2_rank(&mut matrix) {
            r if r == full => f_full += 1.0,
            r if r + 1 == full => f_minus += 1.0,
            _ => {}
        }
    }
    let p_full = rank_probability(full, rows, cols);
    let p_minus = rank_probability(full - 1, rows, cols);
    let probs = [p_full, p_minus, 1.0 - p_full - p_minus];
    let counts = [f_full, f_minus, blocks as f64 - f_full - f_minus];
    let chi2 = chi_square(&counts, &probs, blocks as f64);
    Outcome::new(vec![(-chi2 / 2.0).exp()])
        .with("matrices", blocks as f64)
        .with("full_rank", f_full)
        .with("rank_minus_one", f_minus)
        .with("chi2", chi2)
}

pub fn spectral(bits: &[u8]) -> Outcome {
    let n = bits.len();
    let mut data: Vec<Complex<f64>> = bits
        .iter()
        .map(|&b| Complex::new(2.0 * f64::from(b) - 1.0, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut data);
    let nf = n as f64;
    let threshold = ((1.0f64 / 0.05).ln() * nf).sqrt();
    let n0 = 0.95 * nf / 2.0;
    let n1 = data[..n / 2].iter().filter(|c| c.norm() < threshold).count() as f64;
    let d = (n1 - n0) / (nf * 0.95 * 0.05 / 4.0).sqrt();
    Outcome::new(vec![erfc(d.abs() / std::f64::consts::SQRT_2)])
        .with("n0", n0)
        .with("n1", n1)
        .with("d", d)
}

fn pattern_value(bits: &[u8]) -> usize {
    bits.iter().fold(0, |acc, &b| (acc << 1) | usize::from(b))
}

pub fn non_overlapping_template(bits: &[u8], template: &[u8], blocks: usize) -> Outcome {
    let m = template.len();
    let block_len = bits.len() / blocks;
    let target = pattern_value(template);
    let mf = m as f64;
    let mu = (block_len - m + 1) as f64 / mf.exp2();
    let var = block_len as f64 * (1.0 / mf.exp2() - (2.0 * mf - 1.0) / (2.0 * mf).exp2());
    let mut chi2 = 0.0;
    for block in bits.chunks_exact(block_len).take(blocks) {
        let mut w = 0usize;
        let mut i = 0;
        while i + m <= block_len {
            if pattern_value(&block[i..i + m]) == target {
                w += 1;
                i += m;
            } else {
                i += 1;
            }
        }
        chi2 += (w as f64 - mu).powi(2) / var;
    }
    Outcome::new(vec![igamc(blocks as f64 / 2.0, chi2 / 2.0)])
        .with("m", mf)
        .with("blocks", blocks as f64)
        .with("M", block_len as f64)
        .with("mu", mu)
        .with("variance", var)
        .with("chi2", chi2)
}

/// Class probabilities for the overlapping-template test, `0..k` matches
/// and `>= k`, from the compound-Poisson approximation.
pub fn overlapping_probabilities(m: usize, block_len: usize, k: usize) -> Vec<f64> {
    let lambda = (block_len - m + 1) as f64 / (m as f64).exp2();
    let eta = lambda / 2.0;
    let mut probs = vec![(-eta).exp()];
    for u in 1..k {
        let mut sum = 0.0;
        for l in 1..=u {
            let ln_binom = ln_gamma(u as f64) - ln_gamma(l as f64) - ln_gamma((u - l + 1) as f64);
            sum += (ln_binom + l as f64 * eta.ln() - ln_gamma(l as f64 + 1.0)).exp();
        }
        probs.push((-eta).exp() / (u as f64).exp2() * sum);
    }
    let rest = 1.0 - probs.iter().sum::<f64>();
    probs.push(rest);
    probs
}

/// Class probabilities for the recommended `m = 9, M = 1032, K = 5` setup,
/// which the approximation above gets slightly wrong.
pub const OVERLAPPING_DEFAULT_PROBS: [f64; 6] =
    [0.364091, 0.185659, 0.139381, 0.100571, 0.070432, 0.139865];

pub fn overlapping_template(bits: &[u8], m: usize, block_len: usize, probs: &[f64]) -> Outcome {
    let k = probs.len() - 1;
    let blocks = bits.len() / block_len;
    let mut counts = vec![0.0; probs.len()];
    for block in bits.chunks_exact(block_len) {
        let mut run = 0usize;
        let mut hits = 0usize;
        for &b in block {
            run = if b == 1 { run + 1 } else { 0 };
            if run >= m {
                hits += 1;
            }
        }
        counts[hits.min(k)] += 1.0;
    }
    let chi2 = chi_square(&counts, probs, blocks as f64);
    Outcome::new(vec![igamc(k as f64 / 2.0, chi2 / 2.0)])
        .with("m", m as f64)
        .with("M", block_len as f64)
        .with("blocks", blocks as f64)
        .with("chi2", chi2)
}

/// Expected value and variance of the universal statistic for `L = 1..=16`.
const UNIVERSAL_TABLE: [(f64, f64); 16] = [
    (0.7326495, 0.690),
    (1.5374383, 1.338),
    (2.4016068, 1.901),
    (3.3112247, 2.358),
    (4.2534266, 2.705),
    (5.2177052, 2.954),
    (6.1962507, 3.125),
    (7.1836656, 3.238),
    (8.1764248, 3.311),
    (9.1723243, 3.356),
    (10.170032, 3.384),
    (11.168765, 3.401),
    (12.168070, 3.410),
    (13.167693, 3.416),
    (14.167488, 3.419),
    (15.167379, 3.421),
];

/// Recommended block length for a stream of `n` bits, if it is long enough.
pub fn universal_block_length(n: usize) -> Option<usize> {
    const THRESHOLDS: [usize; 11] = [
        387_840,
        904_960,
        2_068_480,
        4_654_080,
        10_342_400,
        22_753_280,
        49_643_520,
        107_560_960,
        231_669_760,
        496_435_200,
        1_059_061_760,
    ];
    THRESHOLDS.iter().rposition(|&t| n >= t).map(|i| i + 6)
}

pub fn universal(bits: &[u8], l: usize, q: usize) -> Outcome {
    let total_blocks = bits.len() / l;
    let k = total_blocks - q;
    let mut last = vec![0usize; 1 << l];
    let mut sum = 0.0;
    for (i, block) in bits.chunks_exact(l).take(total_blocks).enumerate() {
        let idx = i + 1;
        let v = pattern_value(block);
        if idx > q {
            sum += ((idx - last[v]) as f64).log2();
        }
        last[v] = idx;
    }
    let kf = k as f64;
    let lf = l as f64;
    let f_n = sum / kf;
    let (expected, variance) = UNIVERSAL_TABLE[l - 1];
    let c = 0.7 - 0.8 / lf + (4.0 + 32.0 / lf) * kf.powf(-3.0 / lf) / 15.0;
    let sigma = c * (variance / kf).sqrt();
    let p = erfc((f_n - expected).abs() / (std::f64::consts::SQRT_2 * sigma));
    Outcome::new(vec![p])
        .with("L", lf)
        .with("Q", q as f64)
        .with("K", kf)
        .with("fn", f_n)
        .with("expected", expected)
        .with("sigma", sigma)
}

/// Counts of every overlapping `m`-bit pattern, wrapping around the end.
fn wrapped_counts(bits: &[u8], m: usize) -> Vec<u64> {
    let mut counts = vec![0u64; 1 << m];
    if m == 0 {
        counts[0] = bits.len() as u64;
        return counts;
    }
    let n = bits.len();
    let mask = (1usize << m) - 1;
    let mut v = pattern_value(&bits[..m - 1]);
    for i in 0..n {
        v = ((v << 1) | usize::from(bits[(i + m - 1) % n])) & mask;
        counts[v] += 1;
    }
    counts
}

fn phi(bits: &[u8], m: usize) -> f64 {
    let n = bits.len() as f64;
    wrapped_counts(bits, m)
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum()
}

pub fn approximate_entropy(bits: &[u8], m: usize) -> Outcome {
    let n = bits.len() as f64;
    let apen = phi(bits, m) - phi(bits, m + 1);
    let chi2 = 2.0 * n * (std::f64::consts::LN_2 - apen);
    Outcome::new(vec![igamc((m as f64 - 1.0).exp2(), chi2 / 2.0)])
        .with("m", m as f64)
        .with("apen", apen)
        .with("chi2", chi2)
}

/// Forward and backward cumulative-sums p-values.
pub fn cumulative_sums(bits: &[u8]) -> Outcome {
    let n = bits.len();
    let max_excursion = |it: &mut dyn Iterator<Item = &u8>| {
        let mut s = 0i64;
        let mut z = 0i64;
        for &b in it {
            s += 2 * i64::from(b) - 1;
            z = z.max(s.abs());
        }
        z
    };
    let forward = max_excursion(&mut bits.iter());
    let backward = max_excursion(&mut bits.iter().rev());
    Outcome::new(vec![cusum_p(n, forward), cusum_p(n, backward)])
        .with("z_forward", forward as f64)
        .with("z_backward", backward as f64)
}

pub fn cusum_p(n: usize, z: i64) -> f64 {
    let ni = n as i64;
    let zf = z as f64;
    let sqrt_n = (n as f64).sqrt();
    let mut sum1 = 0.0;
    for k in ((-ni / z + 1) / 4)..=((ni / z - 1) / 4) {
        let k = k as f64;
        sum1 += normal_cdf((4.0 * k + 1.0) * zf / sqrt_n) - normal_cdf((4.0 * k - 1.0) * zf / sqrt_n);
    }
    let mut sum2 = 0.0;
    for k in ((-ni / z - 3) / 4)..=((ni / z - 1) / 4) {
        let k = k as f64;
        sum2 += normal_cdf((4.0 * k + 3.0) * zf / sqrt_n) - normal_cdf((4.0 * k + 1.0) * zf / sqrt_n);
    }
    1.0 - sum1 + sum2
}

/// States visited by the random-excursions test, in report order.
pub const EXCURSION_STATES: [i64; 8] = [-4, -3, -2, -1, 1, 2, 3, 4];

pub fn excursion_probabilities(x: i64) -> [f64; 6] {
    let ax = x.unsigned_abs() as f64;
    let q = 1.0 - 1.0 / (2.0 * ax);
    let mut p = [0.0; 6];
    p[0] = q;
    for (k, slot) in p.iter_mut().enumerate().take(5).skip(1) {
        *slot = 1.0 / (4.0 * ax * ax) * q.powi(k as i32 - 1);
    }
    p[5] = 1.0 / (2.0 * ax) * q.powi(4);
    p
}

/// Number of excursion cycles of the walk (zero returns, plus a trailing
/// partial cycle).
pub fn excursion_cycles(bits: &[u8]) -> usize {
    let mut s = 0i64;
    let mut cycles = 0;
    for &b in bits {
        s += 2 * i64::from(b) - 1;
        if s == 0 {
            cycles += 1;
        }
    }
    if s != 0 {
        cycles += 1;
    }
    cycles
}

/// One p-value per state in [`EXCURSION_STATES`].
pub fn random_excursions(bits: &[u8]) -> Outcome {
    // nu[state][k]: cycles visiting the state exactly k times (k = 5 means >= 5).
    let mut nu = [[0.0f64; 6]; 8];
    let mut visits = [0usize; 8];
    let mut close = |visits: &mut [usize; 8]| {
        for (row, v) in nu.iter_mut().zip(visits.iter_mut()) {
            row[(*v).min(5)] += 1.0;
            *v = 0;
        }
    };
    let mut s = 0i64;
    let mut cycles = 0usize;
    for &b in bits {
        s += 2 * i64::from(b) - 1;
        if s == 0 {
            cycles += 1;
            close(&mut visits);
        } else if (1..=4).contains(&s.abs()) {
            let idx = if s < 0 { (s + 4) as usize } else { (s + 3) as usize };
            visits[idx] += 1;
        }
    }
    if s != 0 {
        cycles += 1;
        close(&mut visits);
    }
    let j = cycles as f64;
    let mut out = Outcome::new(Vec::new()).with("cycles", j);
    for (i, &x) in EXCURSION_STATES.iter().enumerate() {
        let chi2 = chi_square(&nu[i], &excursion_probabilities(x), j);
        out.p_values.push(igamc(2.5, chi2 / 2.0).clamp(0.0, 1.0));
        out = out.with(&format!("chi2[{x}]"), chi2);
    }
    out
}

fn psi_squared(bits: &[u8], m: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    let n = bits.len() as f64;
    let sum: f64 = wrapped_counts(bits, m).iter().map(|&c| (c as f64).powi(2)).sum();
    (m as f64).exp2() / n * sum - n
}

pub fn serial(bits: &[u8], m: usize) -> Outcome {
    let p0 = psi_squared(bits, m);
    let p1 = psi_squared(bits, m - 1);
    let p2 = psi_squared(bits, m.saturating_sub(2));
    let del1 = p0 - p1;
    let del2 = p0 - 2.0 * p1 + p2;
    let mf = m as f64;
    Outcome::new(vec![
        igamc((mf - 2.0).exp2(), del1 / 2.0),
        igamc((mf - 3.0).exp2(), del2 / 2.0),
    ])
    .with("m", mf)
    .with("del1", del1)
    .with("del2", del2)
}

/// Linear complexity of a bit sequence (Berlekamp-Massey over GF(2)).
pub fn berlekamp_massey(bits: &[u8]) -> usize {
    let n = bits.len();
    let mut c = vec![0u8; n + 1];
    let mut b = vec![0u8; n + 1];
    c[0] = 1;
    b[0] = 1;
    let mut l = 0usize;
    let mut m: isize = -1;
    for i in 0..n {
        let mut d = bits[i];
        for j in 1..=l {
            d ^= c[j] & bits[i - j];
        }
        if d == 1 {
            let t = c.clone();
            let shift = (i as isize - m) as usize;
            for j in 0..=n - shift {
                c[j + shift] ^= b[j];
            }
            if 2 * l <= i {
                l = i + 1 - l;
                m = i as isize;
                b = t;
            }
        }
    }
    l
}

pub const LINEAR_COMPLEXITY_PROBS: [f64; 7] =
    [0.010417, 0.03125, 0.125, 0.5, 0.25, 0.0625, 0.020833];

pub fn linear_complexity(bits: &[u8], m: usize) -> Outcome {
    let blocks = bits.len() / m;
    let mf = m as f64;
    let sign = if m.is_multiple_of(2) { 1.0 } else { -1.0 };
    let mu = mf / 2.0 + (9.0 - sign) / 36.0 - (mf / 3.0 + 2.0 / 9.0) / mf.exp2();
    let mut counts = [0.0; 7];
    for block in bits.chunks_exact(m) {
        let l = berlekamp_massey(block) as f64;
        let t = sign * (l - mu) + 2.0 / 9.0;
        let class = [-2.5, -1.5, -0.5, 0.5, 1.5, 2.5]
            .iter()
            .position(|&edge| t <= edge)
            .unwrap_or(6);
        counts[class] += 1.0;
    }
    let chi2 = chi_square(&counts, &LINEAR_COMPLEXITY_PROBS, blocks as f64);
    Outcome::new(vec![igamc(3.0, chi2 / 2.0)])
        .with("M", mf)
        .with("blocks", blocks as f64)
        .with("mu", mu)
        .with("chi2", chi2)
}
