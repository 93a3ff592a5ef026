use std::fmt::Write as _;
use std::path::Path;

use crate::scene::ViewGeometry;
use crate::{Error, Result};

/// Pixels with τ above this count towards the relative error.
pub const REL_ERR_MIN_TAU: f64 = 0.1;
/// Width of the solar- and view-zenith bins.
pub const BIN_WIDTH_DEG: f64 = 10.0;

/// Running error sums over a set of pixels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorAccum {
    pub n: u64,
    pub sum_sq_tau: f64,
    pub sum_abs_tau: f64,
    pub sum_sq_log: f64,
    pub rel_n: u64,
    pub sum_rel: f64,
    pub saturated: u64,
}

impl ErrorAccum {
    pub fn add_pixel(&mut self, pred: f64, truth: f64, saturated: bool) {
        let d = pred - truth;
        self.n += 1;
        self.sum_sq_tau += d * d;
        self.sum_abs_tau += d.abs();
        let dl = pred.ln_1p() - truth.ln_1p();
        self.sum_sq_log += dl * dl;
        if truth > REL_ERR_MIN_TAU {
            self.rel_n += 1;
            self.sum_rel += d.abs() / truth;
        }
        if saturated {
            self.saturated += 1;
        }
    }

    pub fn merge(&mut self, other: &ErrorAccum) {
        self.n += other.n;
        self.sum_sq_tau += other.sum_sq_tau;
        self.sum_abs_tau += other.sum_abs_tau;
        self.sum_sq_log += other.sum_sq_log;
        self.rel_n += other.rel_n;
        self.sum_rel += other.sum_rel;
        self.saturated += other.saturated;
    }

    fn ratio(num: f64, den: u64) -> f64 {
        if den == 0 {
            0.0
        } else {
            num / den as f64
        }
    }

    pub fn rmse_tau(&self) -> f64 {
        Self::ratio(self.sum_sq_tau, self.n).sqrt()
    }

    pub fn mae_tau(&self) -> f64 {
        Self::ratio(self.sum_abs_tau, self.n)
    }

    pub fn rmse_log(&self) -> f64 {
        Self::ratio(self.sum_sq_log, self.n).sqrt()
    }

    pub fn mean_rel_err(&self) -> f64 {
        Self::ratio(self.sum_rel, self.rel_n)
    }

    pub fn saturation_fraction(&self) -> f64 {
        Self::ratio(self.saturated as f64, self.n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinKind {
    Overall,
    Sza,
    Vza,
}

impl BinKind {
    fn label(self) -> &'static str {
        match self {
            BinKind::Overall => "all",
            BinKind::Sza => "sza",
            BinKind::Vza => "vza",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinMetrics {
    pub kind: BinKind,
    pub lo_deg: f64,
    pub hi_deg: f64,
    pub n_pixels: u64,
    pub rmse_tau: f64,
    pub mae_tau: f64,
    pub rmse_log: f64,
    pub mean_rel_err: f64,
    pub saturation_fraction: f64,
}

impl BinMetrics {
    pub fn from_accum(kind: BinKind, lo_deg: f64, hi_deg: f64, acc: &ErrorAccum) -> Self {
        Self {
            kind,
            lo_deg,
            hi_deg,
            n_pixels: acc.n,
            rmse_tau: acc.rmse_tau(),
            mae_tau: acc.mae_tau(),
            rmse_log: acc.rmse_log(),
            mean_rel_err: acc.mean_rel_err(),
            saturation_fraction: acc.saturation_fraction(),
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            BinKind::Overall => "overall".into(),
            k => format!("{}_{}-{}", k.label(), self.lo_deg, self.hi_deg),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryMetrics {
    pub geometry: ViewGeometry,
    pub metrics: BinMetrics,
}

/// Retrieval errors overall, per 10° solar-zenith bin, per 10° view-zenith
/// bin and per evaluated geometry. RMSE figures are in τ units unless
/// suffixed `_log`.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub method: String,
    pub testset_id: String,
    pub config_hash: String,
    pub overall: BinMetrics,
    pub sza_bins: Vec<BinMetrics>,
    pub vza_bins: Vec<BinMetrics>,
    pub per_geometry: Vec<GeometryMetrics>,
    /// Worst over best solar-zenith-bin `rmse_tau`.
    pub flatness: f64,
}

fn bin_index(angle: f64) -> i64 {
    (angle / BIN_WIDTH_DEG).floor() as i64
}

fn flatness(bins: &[BinMetrics]) -> f64 {
    let max = bins
        .iter()
        .map(|b| b.rmse_tau)
        .fold(f64::NEG_INFINITY, f64::max);
    let min = bins
        .iter()
        .map(|b| b.rmse_tau)
        .fold(f64::INFINITY, f64::min);
    if bins.is_empty() || max == min {
        1.0
    } else {
        max / min
    }
}

impl Metrics {
    /// Aggregates per-geometry accumulators into bins.
    pub fn from_geometries(
        method: &str,
        testset_id: &str,
        per_geometry: &[(ViewGeometry, ErrorAccum)],
    ) -> Self {
        let mut overall = ErrorAccum::default();
        let mut sza: std::collections::BTreeMap<i64, ErrorAccum> = Default::default();
        let mut vza: std::collections::BTreeMap<i64, ErrorAccum> = Default::default();
        for (g, acc) in per_geometry {
            overall.merge(acc);
            sza.entry(bin_index(g.sza_deg)).or_default().merge(acc);
            vza.entry(bin_index(g.vza_deg)).or_default().merge(acc);
        }
        let to_bins = |kind, map: std::collections::BTreeMap<i64, ErrorAccum>| -> Vec<BinMetrics> {
            map.iter()
                .map(|(&i, acc)| {
                    BinMetrics::from_accum(
                        kind,
                        i as f64 * BIN_WIDTH_DEG,
                        (i + 1) as f64 * BIN_WIDTH_DEG,
                        acc,
                    )
                })
                .collect()
        };
        let sza_bins = to_bins(BinKind::Sza, sza);
        let vza_bins = to_bins(BinKind::Vza, vza);
        Self {
            method: method.to_string(),
            testset_id: testset_id.to_string(),
            config_hash: String::new(),
            overall: BinMetrics::from_accum(BinKind::Overall, 0.0, 0.0, &overall),
            flatness: flatness(&sza_bins),
            sza_bins,
            vza_bins,
            per_geometry: per_geometry
                .iter()
                .map(|(g, acc)| GeometryMetrics {
                    geometry: *g,
                    metrics: BinMetrics::from_accum(BinKind::Overall, 0.0, 0.0, acc),
                })
                .collect(),
        }
    }

    pub fn worst_sza_bin_rmse(&self) -> f64 {
        self.sza_bins.iter().map(|b| b.rmse_tau).fold(0.0, f64::max)
    }

    fn header(&self) -> String {
        format!(
            "# caac metrics v1\n# config_hash={}\n# testset={}\n",
            self.config_hash, self.testset_id
        )
    }

    /// One row per angle bin plus an `overall` row.
    pub fn to_csv(&self) -> String {
        let mut out = self.header();
        out.push_str("method,bin,angle,lo_deg,hi_deg,n_pixels,rmse_tau,mae_tau,rmse_log,mean_rel_err,saturation_frac,flatness\n");
        let mut row = |b: &BinMetrics, flat: String| {
            let (lo, hi) = if b.kind == BinKind::Overall {
                (String::new(), String::new())
            } else {
                (b.lo_deg.to_string(), b.hi_deg.to_string())
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                self.method,
                b.label(),
                b.kind.label(),
                lo,
                hi,
                b.n_pixels,
                b.rmse_tau,
                b.mae_tau,
                b.rmse_log,
                b.mean_rel_err,
                b.saturation_fraction,
                flat
            );
        };
        row(&self.overall, self.flatness.to_string());
        for b in self.sza_bins.iter().chain(&self.vza_bins) {
            row(b, String::new());
        }
        out
    }

    /// One row per evaluated geometry.
    pub fn per_geometry_csv(&self) -> String {
        let mut out = self.header();
        out.push_str("method,sza_deg,vza_deg,raz_deg,n_pixels,rmse_tau,mae_tau,rmse_log,mean_rel_err,saturation_frac\n");
        for g in &self.per_geometry {
            let m = &g.metrics;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                self.method,
                g.geometry.sza_deg,
                g.geometry.vza_deg,
                g.geometry.raz_deg,
                m.n_pixels,
                m.rmse_tau,
                m.mae_tau,
                m.rmse_log,
                m.mean_rel_err,
                m.saturation_fraction
            );
        }
        out
    }
}

fn parse_f64(field: &str, what: &str) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::format("metrics CSV", format!("bad {what} value {field:?}")))
}

/// Reads a file written by [`Metrics::to_csv`]. Per-geometry rows are not
/// part of that file and come back empty.
pub fn read_metrics_csv(path: &Path) -> Result<Metrics> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics_csv(&text)
}

pub(crate) fn parse_metrics_csv(text: &str) -> Result<Metrics> {
    let mut config_hash = String::new();
    let mut testset_id = None;
    let mut method = None;
    let mut overall = None;
    let mut flat = None;
    let (mut sza_bins, mut vza_bins) = (Vec::new(), Vec::new());
    let mut saw_header = false;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        if let Some(c) = line.strip_prefix('#') {
            let c = c.trim();
            if let Some(v) = c.strip_prefix("config_hash=") {
                config_hash = v.to_string();
            } else if let Some(v) = c.strip_prefix("testset=") {
                testset_id = Some(v.to_string());
            }
            continue;
        }
        if !saw_header {
            saw_header = true;
            if !line.starts_with("method,bin,") {
                return Err(Error::format("metrics CSV", "missing column header"));
            }
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(Error::format(
                "metrics CSV",
                format!("expected 12 columns, got {}", f.len()),
            ));
        }
        method.get_or_insert_with(|| f[0].to_string());
        let kind = match f[2] {
            "all" => BinKind::Overall,
            "sza" => BinKind::Sza,
            "vza" => BinKind::Vza,
            other => {
                return Err(Error::format(
                    "metrics CSV",
                    format!("unknown bin kind {other:?}"),
                ))
            }
        };
        let (lo, hi) = if kind == BinKind::Overall {
            (0.0, 0.0)
        } else {
            (parse_f64(f[3], "lo_deg")?, parse_f64(f[4], "hi_deg")?)
        };
        let b = BinMetrics {
            kind,
            lo_deg: lo,
            hi_deg: hi,
            n_pixels: f[5]
                .parse()
                .map_err(|_| Error::format("metrics CSV", "bad n_pixels"))?,
            rmse_tau: parse_f64(f[6], "rmse_tau")?,
            mae_tau: parse_f64(f[7], "mae_tau")?,
            rmse_log: parse_f64(f[8], "rmse_log")?,
            mean_rel_err: parse_f64(f[9], "mean_rel_err")?,
            saturation_fraction: parse_f64(f[10], "saturation_frac")?,
        };
        match kind {
            BinKind::Overall => {
                flat = Some(parse_f64(f[11], "flatness")?);
                overall = Some(b);
            }
            BinKind::Sza => sza_bins.push(b),
            BinKind::Vza => vza_bins.push(b),
        }
    }
    let missing = |what: &str| Error::format("metrics CSV", format!("missing {what}"));
    Ok(Metrics {
        method: method.ok_or_else(|| missing("rows"))?,
        testset_id: testset_id.ok_or_else(|| missing("testset header"))?,
        config_hash,
        overall: overall.ok_or_else(|| missing("overall row"))?,
        sza_bins,
        vza_bins,
        per_geometry: Vec::new(),
        flatness: flat.ok_or_else(|| missing("flatness"))?,
    })
}

/// Reads a file written by [`Metrics::per_geometry_csv`]; returns the
/// method name and one entry per geometry in file order.
pub fn read_geometry_csv(path: &Path) -> Result<(String, Vec<GeometryMetrics>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_geometry_csv(&text)
}

pub(crate) fn parse_geometry_csv(text: &str) -> Result<(String, Vec<GeometryMetrics>)> {
    let mut rows = text
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    match rows.next() {
        Some(h) if h.starts_with("method,sza_deg,") => {}
        _ => return Err(Error::format("geometry CSV", "missing column header")),
    }
    let mut method = String::new();
    let mut out = Vec::new();
    for line in rows {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(Error::format(
                "geometry CSV",
                format!("expected 10 columns, got {}", f.len()),
            ));
        }
        method = f[0].to_string();
        let geometry = ViewGeometry::new(
            parse_f64(f[1], "sza_deg")?,
            parse_f64(f[2], "vza_deg")?,
            parse_f64(f[3], "raz_deg")?,
            0.0,
        );
        let metrics = BinMetrics {
            kind: BinKind::Overall,
            lo_deg: 0.0,
            hi_deg: 0.0,
            n_pixels: f[4]
                .parse()
                .map_err(|_| Error::format("geometry CSV", "bad n_pixels"))?,
            rmse_tau: parse_f64(f[5], "rmse_tau")?,
            mae_tau: parse_f64(f[6], "mae_tau")?,
            rmse_log: parse_f64(f[7], "rmse_log")?,
            mean_rel_err: parse_f64(f[8], "mean_rel_err")?,
            saturation_fraction: parse_f64(f[9], "saturation_frac")?,
        };
        out.push(GeometryMetrics { geometry, metrics });
    }
    Ok((method, out))
}
