//! Local interaction kernels `Psi(s)` obtained by averaging the response over
//! the rescaled threat region, their tabulation and the heading-averaged
//! variants used by the fluid closures.
//!
//! In the frame of the relative heading `w` (length `s`) a relative position
//! `zeta = zeta_par w_hat + zeta_perp w_hat_perp` has
//! `tau = -zeta_par / (c s)`, `D = |zeta_perp|` and
//! `dba = -c s zeta_perp / |zeta|^2`. The region is therefore a half-strip in
//! front of the observer, cut by the threshold curve, and the integral is done
//! row by row in the lateral offset `h = |zeta_perp|`.

use crate::geometry::{UnitDir, Vec2};
use crate::indicators::{scaled_dba, scaled_md, scaled_tti};
use crate::quadrature::{CircleRule, GaussLegendre};
use crate::rules::{partner_indicators, phi_response, sigma_threshold, AvoidanceParams};
use crate::vmf::{vmf_pdf, VmfError, VmfParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

pub const TABLE_VERSION: u32 = 1;
pub const S_MAX: f64 = 2.0;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("relative speed {0} outside the kernel domain")]
    OutOfRange(f64),
    #[error("threat region has infinite area for these parameters (set a perception radius)")]
    UnboundedRegion,
    #[error("kernel sample {index} (s = {s}) failed: {source}")]
    Sample {
        index: usize,
        s: f64,
        #[source]
        source: Box<KernelError>,
    },
    #[error("kernel table parameter hash mismatch: file has {found}, expected {expected}")]
    HashMismatch { expected: String, found: String },
    #[error("kernel table {path}: line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("kernel table {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Vmf(#[from] VmfError),
}

/// Which part of the region is integrated: partners with positive DBA,
/// negative DBA, or both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    Plus,
    Minus,
    Both,
}

impl Side {
    #[inline]
    fn admits(self, dba: f64) -> bool {
        match self {
            Side::Plus => dba > 0.0,
            Side::Minus => dba < 0.0,
            Side::Both => true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionSpec {
    pub w: Vec2,
    pub side: Side,
    pub params: AvoidanceParams,
}

/// Membership of a rescaled relative position in the threat region.
pub fn in_region(zeta: Vec2, spec: &RegionSpec) -> bool {
    let p = &spec.params;
    if !p.perceives(zeta) {
        return false;
    }
    let (Ok(dba), Ok(tti), Ok(md)) = (
        scaled_dba(zeta, spec.w, p.speed),
        scaled_tti(zeta, spec.w, p.speed),
        scaled_md(zeta, spec.w),
    ) else {
        return false;
    };
    spec.side.admits(dba) && tti > 0.0 && md < p.r_safe && dba.abs() < sigma_threshold(tti, p)
}

/// Resolution of the region quadrature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadratureSpec {
    /// Gauss-Legendre panels across the lateral offset.
    pub h_panels: usize,
    pub h_order: usize,
    /// Geometric scan points along the approach axis used to locate the
    /// threshold crossings.
    pub t_scan: usize,
    pub t_order: usize,
    /// Relative speeds at or below this give zero.
    pub s_min: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            h_panels: 16,
            h_order: 8,
            t_scan: 400,
            t_order: 4,
            s_min: 1e-3,
        }
    }
}

impl QuadratureSpec {
    /// Same rule with every resolution parameter doubled.
    pub fn refined(&self) -> Self {
        Self {
            h_panels: self.h_panels * 2,
            t_scan: self.t_scan * 2,
            ..*self
        }
    }

    fn describe(&self) -> String {
        format!(
            "h_panels={};h_order={};t_scan={};t_order={};s_min={}",
            self.h_panels, self.h_order, self.t_scan, self.t_order, self.s_min
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsiValue {
    /// Mean response over the region, rad/s.
    pub value: f64,
    /// Region area, m^2.
    pub area: f64,
    /// The region was empty; `value` is 0.
    pub degenerate: bool,
}

/// Integral of `max(g, 0)` over `[0, t_max]` and the measure of `{g > 0}`.
fn integrate_row<G: Fn(f64) -> f64>(
    g: G,
    t_ref: f64,
    t_max: f64,
    q: &QuadratureSpec,
    gl: &GaussLegendre,
) -> (f64, f64) {
    let t_lo = (t_ref.min(t_max) * 1e-4).max(1e-300);
    let n = q.t_scan.max(8);
    let ratio = (t_max / t_lo).ln() / (n - 1) as f64;
    let node = |k: usize| -> f64 {
        if k == 0 {
            0.0
        } else if k == n {
            t_max
        } else {
            t_lo * (ratio * (k - 1) as f64).exp()
        }
    };
    let mut num = 0.0;
    let mut len = 0.0;
    let mut ta = 0.0;
    let mut ga = g(ta);
    for k in 1..=n {
        let tb = node(k);
        let gb = g(tb);
        let (a, b) = match (ga > 0.0, gb > 0.0) {
            (true, true) => (ta, tb),
            (false, false) => {
                ta = tb;
                ga = gb;
                continue;
            }
            (true, false) => (ta, bisect(&g, ta, tb)),
            (false, true) => (bisect(&g, ta, tb), tb),
        };
        if b > a {
            for (t, w) in gl.mapped(a, b) {
                num += w * g(t).max(0.0);
            }
            len += b - a;
        }
        ta = tb;
        ga = gb;
    }
    (num, len)
}

/// Root of `g` in `[a, b]` where the sign differs at the ends.
fn bisect<G: Fn(f64) -> f64>(g: &G, mut a: f64, mut b: f64) -> f64 {
    let pos_a = g(a) > 0.0;
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        if (g(m) > 0.0) == pos_a {
            a = m;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Kernel `Psi_pm(s)` (or `Psi(s)` for [`Side::Both`]).
pub fn psi_pm(
    s: f64,
    side: Side,
    p: &AvoidanceParams,
    q: &QuadratureSpec,
) -> Result<PsiValue, KernelError> {
    let half = half_region_integrals(s, p, q)?;
    Ok(half.value(side))
}

/// Integrals over one lateral half of the region. The integrand depends on
/// the lateral offset only through `|zeta_perp|`, so the positive-DBA and
/// negative-DBA halves share these rows and the full region is their sum.
#[derive(Debug, Clone, Copy)]
struct HalfRegion {
    num: f64,
    area: f64,
}

impl HalfRegion {
    fn value(self, side: Side) -> PsiValue {
        let k = if side == Side::Both { 2.0 } else { 1.0 };
        let area = k * self.area;
        if area < 1e-12 {
            return PsiValue {
                value: 0.0,
                area,
                degenerate: true,
            };
        }
        PsiValue {
            value: self.num / self.area,
            area,
            degenerate: false,
        }
    }
}

fn half_region_integrals(
    s: f64,
    p: &AvoidanceParams,
    q: &QuadratureSpec,
) -> Result<HalfRegion, KernelError> {
    if !(s > 0.0 && s <= S_MAX) {
        return Err(KernelError::OutOfRange(s));
    }
    if s <= q.s_min {
        return Ok(HalfRegion {
            num: 0.0,
            area: 0.0,
        });
    }
    if p.perception_radius.is_none() && !p.unlimited_perception_is_finite() {
        return Err(KernelError::UnboundedRegion);
    }
    let cs = p.speed * s;
    let r = p.r_safe;
    let gl_h = GaussLegendre::new(q.h_order);
    let gl_t = GaussLegendre::new(q.t_order);
    let (mut num, mut area) = (0.0, 0.0);
    for panel in 0..q.h_panels {
        let v0 = panel as f64 / q.h_panels as f64;
        let v1 = (panel + 1) as f64 / q.h_panels as f64;
        for (v, wv) in gl_h.mapped(v0, v1) {
            // h = r v^2 clusters rows near the axis where the region is thin
            let h = r * v * v;
            let dh = 2.0 * r * v * wv;
            let t_max = match p.perception_radius {
                Some(rp) => {
                    if h >= rp {
                        continue;
                    }
                    (rp * rp - h * h).sqrt()
                }
                None => {
                    // beyond this distance the threshold is below the DBA
                    let e = p.sigma_exp;
                    let reach = (2.0 * p.b * cs.powf(e - 1.0) / h).powf(1.0 / (e - 2.0));
                    reach.max(h)
                }
            };
            let g = |t: f64| sigma_threshold(t / cs, p) - cs * h / (t * t + h * h);
            let (rn, rl) = integrate_row(g, h, t_max, q, &gl_t);
            num += dh * p.phi0 * rn;
            area += dh * rl;
        }
    }
    if !(area.is_finite() && num.is_finite()) {
        return Err(KernelError::UnboundedRegion);
    }
    Ok(HalfRegion { num, area })
}

/// Hex SHA-256 of the canonical JSON encoding of the avoidance constants.
pub fn params_hash(p: &AvoidanceParams) -> String {
    let json = serde_json::to_string(p).expect("parameters serialize");
    let digest = Sha256::digest(json.as_bytes());
    let mut out = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Hash recorded by [`KernelTable::zero`].
pub const ZERO_KERNEL_HASH: &str = "zero";

/// Tabulated kernels on `[0, 2]` with cubic-spline interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelTable {
    pub s_grid: Vec<f64>,
    pub psi_plus: Vec<f64>,
    pub psi_minus: Vec<f64>,
    pub psi_both: Vec<f64>,
    pub params_hash: String,
    pub quadrature_meta: String,
    slopes: [Vec<f64>; 3],
}

impl KernelTable {
    pub fn from_samples(
        s_grid: Vec<f64>,
        psi_plus: Vec<f64>,
        psi_minus: Vec<f64>,
        psi_both: Vec<f64>,
        params_hash: String,
        quadrature_meta: String,
    ) -> Self {
        let slopes = [
            spline_slopes(&s_grid, &psi_plus),
            spline_slopes(&s_grid, &psi_minus),
            spline_slopes(&s_grid, &psi_both),
        ];
        Self {
            s_grid,
            psi_plus,
            psi_minus,
            psi_both,
            params_hash,
            quadrature_meta,
            slopes,
        }
    }

    /// Kernel identically zero (decoupled interactions).
    pub fn zero() -> Self {
        let s: Vec<f64> = (0..16).map(|i| S_MAX * i as f64 / 15.0).collect();
        let z = vec![0.0; s.len()];
        Self::from_samples(
            s,
            z.clone(),
            z.clone(),
            z,
            ZERO_KERNEL_HASH.into(),
            "zero".into(),
        )
    }

    pub fn is_zero(&self) -> bool {
        self.psi_both
            .iter()
            .chain(&self.psi_plus)
            .all(|&v| v == 0.0)
    }

    fn column(&self, side: Side) -> (&[f64], &[f64]) {
        match side {
            Side::Plus => (&self.psi_plus, &self.slopes[0]),
            Side::Minus => (&self.psi_minus, &self.slopes[1]),
            Side::Both => (&self.psi_both, &self.slopes[2]),
        }
    }

    /// Interpolated kernel value at `s` in `[0, 2]`.
    pub fn interp(&self, s: f64, side: Side) -> Result<f64, KernelError> {
        if !(0.0..=S_MAX).contains(&s) {
            return Err(KernelError::OutOfRange(s));
        }
        Ok(self.eval(s, side))
    }

    /// Interpolated value with `s` clamped into the table range. Used on hot
    /// paths where `s = |v - u|` can exceed 2 by rounding.
    pub fn eval(&self, s: f64, side: Side) -> f64 {
        let (y, d) = self.column(side);
        let x = &self.s_grid;
        let n = x.len();
        let s = s.clamp(x[0], x[n - 1]);
        let i = match x.binary_search_by(|v| v.total_cmp(&s)) {
            Ok(i) => return y[i],
            Err(i) => i.clamp(1, n - 1) - 1,
        };
        let h = x[i + 1] - x[i];
        let t = (s - x[i]) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        let v = (2.0 * t3 - 3.0 * t2 + 1.0) * y[i]
            + (t3 - 2.0 * t2 + t) * h * d[i]
            + (-2.0 * t3 + 3.0 * t2) * y[i + 1]
            + (t3 - t2) * h * d[i + 1];
        v.max(0.0)
    }

    /// Derivative of the interpolant in `s` (zero outside the table range).
    pub fn slope(&self, s: f64, side: Side) -> f64 {
        let (y, d) = self.column(side);
        let x = &self.s_grid;
        let n = x.len();
        if s < x[0] || s > x[n - 1] {
            return 0.0;
        }
        let i = match x.binary_search_by(|v| v.total_cmp(&s)) {
            Ok(i) => return d[i],
            Err(i) => i.clamp(1, n - 1) - 1,
        };
        let h = x[i + 1] - x[i];
        let t = (s - x[i]) / h;
        let t2 = t * t;
        ((6.0 * t2 - 6.0 * t) * y[i]
            + (3.0 * t2 - 4.0 * t + 1.0) * h * d[i]
            + (-6.0 * t2 + 6.0 * t) * y[i + 1]
            + (3.0 * t2 - 2.0 * t) * h * d[i + 1])
            / h
    }

    /// Checks the stored hash against the given parameters.
    pub fn check_params(&self, p: &AvoidanceParams) -> Result<(), KernelError> {
        let expected = params_hash(p);
        if self.params_hash == ZERO_KERNEL_HASH || self.params_hash == expected {
            Ok(())
        } else {
            Err(KernelError::HashMismatch {
                expected,
                found: self.params_hash.clone(),
            })
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# crowdflux kernel table");
        let _ = writeln!(out, "# version={TABLE_VERSION}");
        let _ = writeln!(out, "# params_hash={}", self.params_hash);
        let _ = writeln!(out, "# n_s={}", self.s_grid.len());
        let _ = writeln!(out, "# quadrature={}", self.quadrature_meta);
        let _ = writeln!(out, "s,psi_plus,psi_minus,psi_both");
        for i in 0..self.s_grid.len() {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                self.s_grid[i], self.psi_plus[i], self.psi_minus[i], self.psi_both[i]
            );
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), KernelError> {
        let io = |source| KernelError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(self.to_csv().as_bytes()).map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self, KernelError> {
        let f = std::fs::File::open(path).map_err(|source| KernelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(std::io::BufReader::new(f), &path.display().to_string())
    }

    /// Reads a table and rejects it unless it was built for `p`.
    pub fn load_checked(path: &Path, p: &AvoidanceParams) -> Result<Self, KernelError> {
        let t = Self::read(path)?;
        t.check_params(p)?;
        Ok(t)
    }

    pub fn parse<R: BufRead>(reader: R, name: &str) -> Result<Self, KernelError> {
        let err = |line: usize, msg: String| KernelError::Parse {
            path: name.to_string(),
            line,
            msg,
        };
        let (mut version, mut hash, mut n_s, mut meta) = (None, None, None, String::new());
        let mut cols: [Vec<f64>; 4] = Default::default();
        let mut saw_header = false;
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|source| KernelError::Io {
                path: name.to_string(),
                source,
            })?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.trim().split_once('=') {
                    match k {
                        "version" => version = v.parse::<u32>().ok(),
                        "params_hash" => hash = Some(v.to_string()),
                        "n_s" => n_s = v.parse::<usize>().ok(),
                        "quadrature" => meta = v.to_string(),
                        _ => {}
                    }
                }
                continue;
            }
            if !saw_header {
                if line != "s,psi_plus,psi_minus,psi_both" {
                    return Err(err(lineno, format!("unexpected column header `{line}`")));
                }
                saw_header = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(err(
                    lineno,
                    format!("expected 4 fields, got {}", fields.len()),
                ));
            }
            for (c, f) in cols.iter_mut().zip(fields) {
                let v: f64 = f
                    .parse()
                    .map_err(|_| err(lineno, format!("bad number `{f}`")))?;
                if !v.is_finite() {
                    return Err(err(lineno, format!("non-finite value `{f}`")));
                }
                c.push(v);
            }
        }
        match version {
            Some(TABLE_VERSION) => {}
            Some(v) => return Err(err(0, format!("unsupported version {v}"))),
            None => return Err(err(0, "missing version".into())),
        }
        let hash = hash.ok_or_else(|| err(0, "missing params_hash".into()))?;
        let [s, pp, pm, pb] = cols;
        if n_s != Some(s.len()) {
            return Err(err(0, format!("n_s header {n_s:?} but {} rows", s.len())));
        }
        if s.len() < 2
            || s[0] != 0.0
            || s.windows(2).any(|w| w[1] <= w[0])
            || *s.last().unwrap() != S_MAX
        {
            return Err(err(0, "s grid must increase strictly from 0 to 2".into()));
        }
        if pp.iter().chain(&pm).chain(&pb).any(|&v| v < 0.0) {
            return Err(err(0, "negative kernel value".into()));
        }
        Ok(Self::from_samples(s, pp, pm, pb, hash, meta))
    }
}

/// Node slopes of the natural cubic spline, so the interpolant is twice
/// continuously differentiable.
fn spline_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let del: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    let mut sub = vec![0.0; n];
    let mut diag = vec![2.0; n];
    let mut sup = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    sup[0] = 1.0;
    rhs[0] = 3.0 * del[0];
    for i in 1..n - 1 {
        sub[i] = h[i];
        diag[i] = 2.0 * (h[i - 1] + h[i]);
        sup[i] = h[i - 1];
        rhs[i] = 3.0 * (h[i] * del[i - 1] + h[i - 1] * del[i]);
    }
    sub[n - 1] = 1.0;
    rhs[n - 1] = 3.0 * del[n - 2];
    for i in 1..n {
        let m = sub[i] / diag[i - 1];
        diag[i] -= m * sup[i - 1];
        rhs[i] -= m * rhs[i - 1];
    }
    let mut d = vec![0.0; n];
    d[n - 1] = rhs[n - 1] / diag[n - 1];
    for i in (0..n - 1).rev() {
        d[i] = (rhs[i] - sup[i] * d[i + 1]) / diag[i];
    }
    d
}

/// Table nodes `2 (i / (n - 1))^1.5`, denser near 0 where `Psi` rises like a
/// fractional power of `s`.
pub fn table_grid(n_s: usize) -> Vec<f64> {
    (0..n_s)
        .map(|i| {
            if i + 1 == n_s {
                S_MAX
            } else {
                S_MAX * (i as f64 / (n_s - 1) as f64).powf(1.5)
            }
        })
        .collect()
}

/// Tabulates the kernels on [`table_grid`] nodes.
pub fn tabulate(
    p: &AvoidanceParams,
    q: &QuadratureSpec,
    n_s: usize,
) -> Result<KernelTable, KernelError> {
    let n_s = n_s.max(16);
    let s_grid = table_grid(n_s);
    let rows: Vec<[f64; 3]> = s_grid
        .par_iter()
        .enumerate()
        .map(|(index, &s)| {
            if s == 0.0 {
                return Ok([0.0; 3]);
            }
            let wrap = |e: KernelError| KernelError::Sample {
                index,
                s,
                source: Box::new(e),
            };
            let half = half_region_integrals(s, p, q).map_err(wrap)?;
            Ok([Side::Plus, Side::Minus, Side::Both].map(|side| half.value(side).value))
        })
        .collect::<Result<_, KernelError>>()?;
    Ok(KernelTable::from_samples(
        s_grid,
        rows.iter().map(|r| r[0]).collect(),
        rows.iter().map(|r| r[1]).collect(),
        rows.iter().map(|r| r[2]).collect(),
        params_hash(p),
        q.describe(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub area: f64,
    pub hits: u64,
}

/// Monte-Carlo estimate of the kernel by uniform sampling of the square
/// `[-r_p, r_p]^2`, with the region test written out directly in world
/// coordinates and `w` pointing along `heading`.
pub fn psi_monte_carlo(
    s: f64,
    heading: f64,
    side: Side,
    p: &AvoidanceParams,
    samples: u64,
    seed: u64,
) -> Result<McEstimate, KernelError> {
    let Some(rp) = p.perception_radius else {
        return Err(KernelError::UnboundedRegion);
    };
    let (wx, wy) = (s * heading.cos(), s * heading.sin());
    let c = p.speed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hits, mut mean, mut m2) = (0u64, 0.0f64, 0.0f64);
    for _ in 0..samples {
        let x = rp * (2.0 * rng.random::<f64>() - 1.0);
        let y = rp * (2.0 * rng.random::<f64>() - 1.0);
        let r2 = x * x + y * y;
        if r2 >= rp * rp || r2 == 0.0 {
            continue;
        }
        let cross = x * wy - y * wx;
        let dba = c * cross / r2;
        let tti = -(x * wx + y * wy) / (c * s * s);
        let md = cross.abs() / s;
        let sig = p.a + p.b / (tti + p.tau0).powf(p.sigma_exp);
        let side_ok = match side {
            Side::Plus => dba > 0.0,
            Side::Minus => dba < 0.0,
            Side::Both => true,
        };
        if side_ok && tti > 0.0 && md < p.r_safe && dba.abs() < sig {
            let phi = p.phi0 * (sig - dba.abs());
            hits += 1;
            let delta = phi - mean;
            mean += delta / hits as f64;
            m2 += delta * (phi - mean);
        }
    }
    let var = if hits > 1 {
        m2 / (hits - 1) as f64
    } else {
        0.0
    };
    Ok(McEstimate {
        mean,
        std_err: (var / hits.max(1) as f64).sqrt(),
        area: 4.0 * rp * rp * hits as f64 / samples as f64,
        hits,
    })
}

/// Whether partner heading `v` belongs to the circle set of threatening
/// headings for the observer `(x, u)` and a partner at `y`.
pub fn sigma_set_membership(
    v: UnitDir,
    x: Vec2,
    u: UnitDir,
    y: Vec2,
    side: Side,
    p: &AvoidanceParams,
) -> bool {
    match partner_indicators(x, u, y, v, p) {
        Some(ind) => {
            side.admits(ind.dba)
                && ind.tti > 0.0
                && ind.md < p.r_safe
                && ind.dba.abs() < sigma_threshold(ind.tti, p)
        }
        None => false,
    }
}

/// Heading averages of the response (`H`) and of the indicator (`H0`) over
/// the threatening headings, weighted by the distribution with mean `mean`.
pub fn h_kernels(
    x: Vec2,
    u: UnitDir,
    y: Vec2,
    mean: Vec2,
    side: Side,
    p: &AvoidanceParams,
    rule: &CircleRule,
) -> Result<(f64, f64), KernelError> {
    let m = VmfParams::from_mean(mean)?;
    let (mut h, mut h0) = (0.0, 0.0);
    if !p.perceives(y - x) {
        return Ok((0.0, 0.0));
    }
    for &v in &rule.dirs {
        let Some(ind) = partner_indicators(x, u, y, v, p) else {
            continue;
        };
        if side.admits(ind.dba)
            && ind.tti > 0.0
            && ind.md < p.r_safe
            && ind.dba.abs() < sigma_threshold(ind.tti, p)
        {
            let w = vmf_pdf(v, &m) * rule.weight;
            h0 += w;
            h += w * phi_response(ind.dba.abs(), ind.tti, p);
        }
    }
    Ok((h, h0))
}

/// `int Psi(|v - u|) M_U(v) dv` for the distribution with mean `mean`.
pub fn vmf_avg_kernel(
    u: UnitDir,
    mean: Vec2,
    table: &KernelTable,
    side: Side,
    rule: &CircleRule,
) -> Result<f64, KernelError> {
    let m = VmfParams::from_mean(mean)?;
    Ok(rule.integrate(|v| table.eval((v.vec() - u.vec()).norm(), side) * vmf_pdf(v, &m)))
}

/// Kernel values between the nodes of a uniform circle rule. Since
/// `|v_j - u_i| = 2 |sin((j - i) pi / n)|`, the matrix is circulant.
#[derive(Debug, Clone)]
pub struct CircleKernel {
    row: Vec<f64>,
    weight: f64,
}

impl CircleKernel {
    pub fn new(table: &KernelTable, side: Side, n: usize) -> Self {
        let row = (0..n)
            .map(|m| {
                let s = 2.0 * (std::f64::consts::PI * m as f64 / n as f64).sin().abs();
                table.eval(s, side)
            })
            .collect();
        Self {
            row,
            weight: std::f64::consts::TAU / n as f64,
        }
    }

    pub fn len(&self) -> usize {
        self.row.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.row.iter().all(|&v| v == 0.0)
    }

    /// `out_i = sum_j Psi(|v_j - u_i|) density_j dtheta`, accumulated into `out`
    /// with factor `scale`.
    pub fn apply_add(&self, density: &[f64], scale: f64, out: &mut [f64]) {
        let n = self.row.len();
        debug_assert_eq!(density.len(), n);
        let k = scale * self.weight;
        for (i, o) in out.iter_mut().enumerate() {
            // row index is (j - i) mod n
            let (before, after) = density.split_at(i);
            let mut acc = 0.0;
            for (d, r) in after.iter().zip(&self.row) {
                acc += r * d;
            }
            for (d, r) in before.iter().zip(&self.row[n - i..]) {
                acc += r * d;
            }
            *o += k * acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{PI, TAU};

    fn spec(w: Vec2, side: Side) -> RegionSpec {
        RegionSpec {
            w,
            side,
            params: AvoidanceParams::default(),
        }
    }

    #[test]
    fn region_membership_cases() {
        let w = Vec2::new(-2.0, 0.0);
        // zeta . w > 0 means the partner recedes
        assert!(!in_region(Vec2::new(-3.0, 0.1), &spec(w, Side::Both)));
        assert!(in_region(Vec2::new(3.0, 0.1), &spec(w, Side::Both)));
        assert!(!in_region(Vec2::new(3.0, 0.7), &spec(w, Side::Both)));
        // beyond perception
        assert!(!in_region(Vec2::new(9.0, 0.1), &spec(w, Side::Both)));
    }

    #[test]
    fn region_mirror_symmetry() {
        let w = Vec2::new(0.3, -1.1);
        let axis = UnitDir::new(w).unwrap().vec();
        for i in 0..400 {
            let z = Vec2::new((i as f64 * 0.37).sin() * 6.0, (i as f64 * 0.73).cos() * 6.0);
            let mirror = axis * (2.0 * z.dot(axis)) - z;
            assert_eq!(
                in_region(z, &spec(w, Side::Plus)),
                in_region(mirror, &spec(w, Side::Minus))
            );
        }
    }

    #[test]
    fn psi_sides_and_isotropy() {
        let p = AvoidanceParams::default();
        let q = QuadratureSpec::default();
        for s in [0.5, 1.0, 2.0] {
            let a = psi_pm(s, Side::Plus, &p, &q).unwrap().value;
            let b = psi_pm(s, Side::Minus, &p, &q).unwrap().value;
            assert!((a - b).abs() < 1e-6);
        }
        // independent sampling of both halves in several directions
        let quad = psi_pm(1.0, Side::Plus, &p, &q).unwrap().value;
        for (k, side) in [
            (0, Side::Plus),
            (1, Side::Minus),
            (2, Side::Plus),
            (3, Side::Minus),
        ] {
            let mc =
                psi_monte_carlo(1.0, k as f64 * PI / 2.0 + 0.1, side, &p, 1_000_000, k).unwrap();
            assert!(
                (mc.mean - quad).abs() < 4.0 * mc.std_err,
                "{mc:?} vs {quad}"
            );
        }
    }

    #[test]
    fn psi_matches_monte_carlo_head_on() {
        let p = AvoidanceParams::default();
        let quad = psi_pm(2.0, Side::Both, &p, &QuadratureSpec::default()).unwrap();
        let mc = psi_monte_carlo(2.0, 0.4, Side::Both, &p, 2_000_000, 3).unwrap();
        assert!((mc.mean - quad.value).abs() < 3.0 * mc.std_err);
        assert!((mc.mean - quad.value).abs() / quad.value < 0.01);
        assert!((mc.area - quad.area).abs() / quad.area < 0.01);
    }

    #[test]
    fn unlimited_perception() {
        let q = QuadratureSpec::default();
        let p = AvoidanceParams {
            perception_radius: None,
            ..Default::default()
        };
        assert!(matches!(
            psi_pm(1.0, Side::Both, &p, &q),
            Err(KernelError::UnboundedRegion)
        ));
        let steep = AvoidanceParams {
            perception_radius: None,
            sigma_exp: 4.0,
            b: 2.0,
            ..Default::default()
        };
        let a = psi_pm(1.0, Side::Both, &steep, &q).unwrap();
        let b = psi_pm(1.0, Side::Both, &steep, &q.refined()).unwrap();
        assert!(a.value > 0.0 && a.area.is_finite());
        assert!((a.value - b.value).abs() / b.value < 5e-3, "{a:?} {b:?}");
    }

    #[test]
    fn out_of_range_and_small_s() {
        let p = AvoidanceParams::default();
        let q = QuadratureSpec::default();
        assert!(psi_pm(2.5, Side::Both, &p, &q).is_err());
        assert!(psi_pm(0.0, Side::Both, &p, &q).is_err());
        let v = psi_pm(5e-4, Side::Both, &p, &q).unwrap();
        assert!(v.degenerate && v.value == 0.0);
    }

    fn small_table() -> KernelTable {
        tabulate(&AvoidanceParams::default(), &QuadratureSpec::default(), 16).unwrap()
    }

    #[test]
    fn table_invariants_and_round_trip() {
        let t = small_table();
        assert_eq!(t.s_grid.len(), 16);
        assert_eq!(t.psi_both[0], 0.0);
        for i in 0..16 {
            assert!(t.psi_plus[i] >= 0.0);
            assert!((t.psi_plus[i] - t.psi_minus[i]).abs() < 1e-6);
            assert_eq!(t.interp(t.s_grid[i], Side::Both).unwrap(), t.psi_both[i]);
        }
        assert_eq!(t.interp(0.0, Side::Both).unwrap(), 0.0);
        assert!(t.interp(2.1, Side::Both).is_err());
        assert!(t.interp(-0.1, Side::Both).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.csv");
        t.write(&path).unwrap();
        let back = KernelTable::load_checked(&path, &AvoidanceParams::default()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_csv(), t.to_csv());
        let other = AvoidanceParams {
            r_safe: 0.5,
            ..Default::default()
        };
        assert!(matches!(
            KernelTable::load_checked(&path, &other),
            Err(KernelError::HashMismatch { .. })
        ));
    }

    #[test]
    fn interpolation_between_nodes() {
        let t = small_table();
        let p = AvoidanceParams::default();
        let q = QuadratureSpec::default();
        // the error at a midpoint must be of the size predicted by comparing
        // with a table of twice the density
        let fine = tabulate(&p, &q, 31).unwrap();
        for i in 0..15 {
            let s = 0.5 * (t.s_grid[i] + t.s_grid[i + 1]);
            let exact = psi_pm(s, Side::Both, &p, &q).unwrap().value;
            let v = t.interp(s, Side::Both).unwrap();
            let estimate = (v - fine.interp(s, Side::Both).unwrap()).abs();
            let err = (v - exact).abs();
            assert!(
                err < 2.0 * estimate + 1e-4 * exact,
                "s={s} {err} {estimate}"
            );
            // the coarse grid cannot follow the steep rise next to the origin
            if s > 0.2 {
                assert!(err < 1e-2 * exact, "s={s} {v} {exact}");
            }
        }
    }

    #[test]
    fn parse_rejects_garbage() {
        let bad = "# version=1\n# params_hash=x\n# n_s=2\ns,psi_plus,psi_minus,psi_both\n0,0,0,0\n2,1,1,nope\n";
        assert!(KernelTable::parse(bad.as_bytes(), "mem").is_err());
        let neg = "# version=1\n# params_hash=x\n# n_s=2\ns,psi_plus,psi_minus,psi_both\n0,0,0,0\n2,1,-1,1\n";
        assert!(KernelTable::parse(neg.as_bytes(), "mem").is_err());
    }

    #[test]
    fn spline_is_exact_on_lines_and_c2_at_nodes() {
        let x: Vec<f64> = (0..8).map(|i| 2.0 * (i as f64 / 7.0).powf(1.5)).collect();
        let line: Vec<f64> = x.iter().map(|s| 0.3 + 0.7 * s).collect();
        let t = KernelTable::from_samples(
            x.clone(),
            line.clone(),
            line.clone(),
            line,
            "h".into(),
            "m".into(),
        );
        for i in 0..=100 {
            let s = 2.0 * i as f64 / 100.0;
            assert!((t.eval(s, Side::Both) - (0.3 + 0.7 * s)).abs() < 1e-13);
            assert!((t.slope(s, Side::Both) - 0.7).abs() < 1e-12);
        }
        let y: Vec<f64> = x.iter().map(|s| s.sqrt() + s * s).collect();
        let t =
            KernelTable::from_samples(x.clone(), y.clone(), y.clone(), y, "h".into(), "m".into());
        let h = 1e-5;
        for &node in &x[1..7] {
            let left = (t.slope(node - h, Side::Both) - t.slope(node - 2.0 * h, Side::Both)) / h;
            let right = (t.slope(node + 2.0 * h, Side::Both) - t.slope(node + h, Side::Both)) / h;
            assert!(
                (left - right).abs() < 1e-3 * (1.0 + left.abs()),
                "{left} {right}"
            );
        }
    }

    #[test]
    fn sigma_set_examples() {
        let p = AvoidanceParams::default();
        let x = Vec2::ZERO;
        let u = UnitDir::E1;
        let y = Vec2::new(4.0, 0.0);
        assert!(!sigma_set_membership(u, x, u, y, Side::Both, &p));
        assert!(sigma_set_membership(
            UnitDir::from_angle(PI),
            x,
            u,
            y,
            Side::Both,
            &p
        ));
        // partner walking away faster than we close in? heading +x equals ours
        assert!(!sigma_set_membership(
            UnitDir::from_angle(0.3),
            x,
            u,
            Vec2::new(-4.0, 0.0),
            Side::Both,
            &p
        ));
    }

    #[test]
    fn h_kernels_properties() {
        let p = AvoidanceParams::default();
        let rule = CircleRule::new(256);
        let x = Vec2::ZERO;
        let u = UnitDir::E1;
        // out of perception range
        let (h, h0) = h_kernels(
            x,
            u,
            Vec2::new(20.0, 0.0),
            Vec2::new(0.3, 0.0),
            Side::Both,
            &p,
            &rule,
        )
        .unwrap();
        assert_eq!((h, h0), (0.0, 0.0));

        let y = Vec2::new(3.0, 0.4);
        let (h, h0) = h_kernels(x, u, y, Vec2::ZERO, Side::Both, &p, &rule).unwrap();
        // arc measure by fine counting
        let n = 200_000;
        let count = (0..n)
            .filter(|&j| {
                let v = UnitDir::from_angle((j as f64 + 0.5) * TAU / n as f64);
                sigma_set_membership(v, x, u, y, Side::Both, &p)
            })
            .count();
        let arc = count as f64 / n as f64;
        assert!((h0 - arc).abs() < 2.0 / 256.0, "{h0} {arc}");
        assert!(h0 > 0.0 && h0 <= 1.0);
        let max_phi = rule
            .dirs
            .iter()
            .filter(|&&v| sigma_set_membership(v, x, u, y, Side::Both, &p))
            .map(|&v| {
                let ind = partner_indicators(x, u, y, v, &p).unwrap();
                phi_response(ind.dba.abs(), ind.tti, &p)
            })
            .fold(0.0, f64::max);
        assert!(h / h0 <= max_phi + 1e-12);
    }

    #[test]
    fn heading_averaged_kernel() {
        let t = small_table();
        let rule = CircleRule::new(256);
        let a = vmf_avg_kernel(UnitDir::E1, Vec2::ZERO, &t, Side::Both, &rule).unwrap();
        let b = vmf_avg_kernel(rule.dirs[37], Vec2::ZERO, &t, Side::Both, &rule).unwrap();
        assert!((a - b).abs() < 1e-10);
        let off =
            vmf_avg_kernel(UnitDir::from_angle(1.3), Vec2::ZERO, &t, Side::Both, &rule).unwrap();
        assert!((a - off).abs() < 1e-3 * a);
        let mean = UnitDir::from_angle(0.8).vec() * crate::vmf::mean_resultant(1e3);
        let u = UnitDir::from_angle(-0.4);
        let c = vmf_avg_kernel(u, mean, &t, Side::Both, &rule).unwrap();
        let expect = t.eval(
            (UnitDir::from_angle(0.8).vec() - u.vec()).norm(),
            Side::Both,
        );
        assert!((c - expect).abs() < 0.01 * expect);
        let rot = 0.9;
        let d1 = vmf_avg_kernel(u, Vec2::new(0.3, 0.2), &t, Side::Both, &rule).unwrap();
        let d2 = vmf_avg_kernel(
            u.rotate(rot),
            Vec2::new(0.3, 0.2).rotate(rot),
            &t,
            Side::Both,
            &rule,
        )
        .unwrap();
        assert!((d1 - d2).abs() < 1e-3 * d1);
    }

    #[test]
    fn circulant_matches_direct_sum() {
        let t = small_table();
        let n = 32;
        let k = CircleKernel::new(&t, Side::Both, n);
        let rule = CircleRule::new(n);
        let dens: Vec<f64> = (0..n).map(|j| 1.0 + (j as f64 * 0.4).sin()).collect();
        let mut out = vec![0.0; n];
        k.apply_add(&dens, 1.0, &mut out);
        for i in 0..n {
            let direct: f64 = (0..n)
                .map(|j| {
                    t.eval((rule.dirs[j].vec() - rule.dirs[i].vec()).norm(), Side::Both) * dens[j]
                })
                .sum::<f64>()
                * rule.weight;
            assert!((out[i] - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn slope_matches_difference_quotient() {
        let s = table_grid(20);
        let v: Vec<f64> = s.iter().map(|&x| (1.0 + x).ln()).collect();
        let t = KernelTable::from_samples(s, v.clone(), v.clone(), v, "h".into(), "q".into());
        for k in 1..40 {
            let x = 0.0173 + 0.049 * k as f64;
            let h = 1e-6;
            let fd = (t.eval(x + h, Side::Both) - t.eval(x - h, Side::Both)) / (2.0 * h);
            assert!((t.slope(x, Side::Both) - fd).abs() < 1e-6, "{x}");
        }
    }
}
