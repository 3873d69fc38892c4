//! Independent reference implementations, written from the textbook
//! definitions rather than from the library code.

use std::collections::BTreeMap;

use pianoplan::metrics::ListeningRow;
use pianoplan::seqcvae::GaussianSeq;
use rand::Rng;

/// `(X^T X)^{-1} X^T y` by Gaussian elimination with partial pivoting,
/// evaluated back at the abscissae. The basis is powers of `2t - 1`: the
/// same polynomial space as the monomials in `t`, but conditioned well
/// enough for the normal equations at degree 8.
pub fn normal_equations_fit(t: &[f64], y: &[f64], degree: usize) -> Vec<f64> {
    let p = degree + 1;
    let mut a = vec![vec![0.0; p + 1]; p];
    for (&ti, &yi) in t.iter().zip(y) {
        let pw: Vec<f64> = (0..p).map(|j| (2.0 * ti - 1.0).powi(j as i32)).collect();
        for r in 0..p {
            for c in 0..p {
                a[r][c] += pw[r] * pw[c];
            }
            a[r][p] += pw[r] * yi;
        }
    }
    for col in 0..p {
        let piv = (col..p).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        for r in col + 1..p {
            let f = a[r][col] / a[col][col];
            for c in col..=p {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    let mut beta = vec![0.0; p];
    for r in (0..p).rev() {
        let s: f64 = (r + 1..p).map(|c| a[r][c] * beta[c]).sum();
        beta[r] = (a[r][p] - s) / a[r][r];
    }
    t.iter().map(|&ti| (0..p).map(|j| beta[j] * (2.0 * ti - 1.0).powi(j as i32)).sum()).collect()
}

/// Mean product of standardized values.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let stats = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / n;
        let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
        (m, s)
    };
    let ((ma, sa), (mb, sb)) = (stats(a), stats(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) / sa * (y - mb) / sb).sum::<f64>() / n
}

pub fn pop_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt()
}

/// R^2 from the 2x2 normal equations of `y = b0 + b1 x`, clamped to [0, 1].
pub fn r_squared(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let det = n * sxx - sx * sx;
    let b1 = (n * sxy - sx * sy) / det;
    let b0 = (sy - b1 * sx) / n;
    let my = sy / n;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - b0 - b1 * a).powi(2)).sum();
    let sst: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (1.0 - sse / sst).clamp(0.0, 1.0)
}

/// `values[m][t]`.
pub fn consistency(values: &[Vec<f64>]) -> f64 {
    let t = values[0].len();
    let mut c = 0.0;
    for step in 0..t {
        let across: Vec<f64> = values.iter().map(|v| v[step]).collect();
        c += pop_std(&across);
    }
    1.0 - c / t as f64
}

pub fn restrictiveness(u1: &[Vec<f64>], u2: &[Vec<f64>]) -> f64 {
    let mut r = 0.0;
    for s in 0..u1.len() {
        r += pop_std(&u1[s]) + pop_std(&u2[s]);
    }
    1.0 - r / (2.0 * u1.len() as f64)
}

pub fn linearity(schedule: &[f64], values: &[Vec<f64>]) -> f64 {
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for v in values {
        for (d, y) in schedule.iter().zip(v) {
            xs.push(*d);
            ys.push(*y);
        }
    }
    r_squared(&xs, &ys)
}

/// Per model: (mean winning rate, population std, top-ranking rate) over
/// the participants of `group` ("all" for everyone).
pub fn listening(rows: &[ListeningRow], group: &str) -> BTreeMap<String, (f64, f64, f64)> {
    let mut tally: BTreeMap<&str, BTreeMap<&str, (f64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| group == "all" || r.group == group) {
        let e = tally.entry(&r.participant).or_default().entry(&r.model).or_default();
        e.0 += r.beat_plain as f64;
        e.1 += 1.0;
    }
    let models: Vec<&str> = tally.values().flat_map(|t| t.keys().copied()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let mut out = BTreeMap::new();
    for m in models {
        let rates: Vec<f64> = tally.values().filter_map(|t| t.get(m)).map(|v| v.0 / v.1).collect();
        let mut credit = 0.0;
        for t in tally.values() {
            let best = t.values().map(|v| v.0).fold(f64::MIN, f64::max);
            let tops = t.values().filter(|v| v.0 == best).count() as f64;
            if t.get(m).is_some_and(|v| v.0 == best) {
                credit += 1.0 / tops;
            }
        }
        let mean = rates.iter().sum::<f64>() / rates.len() as f64;
        out.insert(m.to_string(), (mean, pop_std(&rates), credit / tally.len() as f64));
    }
    out
}

fn log_density(z: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    z.iter()
        .zip(mu)
        .zip(sigma)
        .map(|((z, m), s)| -0.5 * ((z - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
        .sum()
}

/// Monte-Carlo estimate of KL(q || p) and its standard error.
pub fn monte_carlo_kl(q: &GaussianSeq, p: &GaussianSeq, samples: usize, rng: &mut impl Rng) -> (f64, f64) {
    let vals: Vec<f64> = (0..samples)
        .map(|_| {
            let z = q.reparameterize(rng);
            log_density(z.data(), q.mu.data(), q.sigma.data()) - log_density(z.data(), p.mu.data(), p.sigma.data())
        })
        .collect();
    let n = samples as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
