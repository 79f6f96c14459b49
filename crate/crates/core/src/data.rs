//! File formats: the long-format data CSV, sitewise fits, exclusions,
//! posterior draws, return levels, predictive draws, variograms and meshes.
//!
//! Every floating-point number is written with 17 significant digits.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::link::TransformedParameters;
use crate::maxstep::{Exclusion, FitRecord, SiteSeries};
use crate::products::{ReturnLevel, VariogramBin};
use crate::smooth::{DrawMatrix, HyperParameters, PosteriorSamples};
use crate::spde::Mesh;

pub const DATA_HEADER: [&str; 5] = ["site_id", "lon", "lat", "time_index", "value"];
pub const FITS_HEADER: [&str; 14] = [
    "site_id", "lon", "lat", "threshold", "n_exceedances", "psi_hat", "tau_hat", "phi_hat", "q11", "q12", "q13", "q22", "q23", "q33",
];
pub const EXCLUSIONS_HEADER: [&str; 4] = ["site_id", "lon", "lat", "reason"];
const DRAWS_MAGIC: &[u8; 8] = b"EXLGMDR1";

/// Format with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteInfo {
    pub site_id: u64,
    pub lon: f64,
    pub lat: f64,
}

/// `N` sites by `T` time steps, complete and nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sites: Vec<SiteInfo>,
    /// `values[i][t]`.
    pub values: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(sites: Vec<SiteInfo>, values: Vec<Vec<f64>>) -> Result<Self> {
        let d = Self { sites, values };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sites.is_empty() {
            return Err(Error::invalid("dataset has no sites"));
        }
        if self.sites.len() != self.values.len() {
            return Err(Error::invalid("site list and value matrix disagree"));
        }
        let mut seen = HashMap::new();
        for (i, s) in self.sites.iter().enumerate() {
            if seen.insert(s.site_id, i).is_some() {
                return Err(Error::invalid(format!("duplicate site_id {}", s.site_id)));
            }
            if !(s.lon.is_finite() && s.lat.is_finite()) {
                return Err(Error::invalid(format!("site {} has non-finite coordinates", s.site_id)));
            }
        }
        let t = self.values[0].len();
        if t == 0 {
            return Err(Error::invalid("series are empty"));
        }
        for (s, v) in self.sites.iter().zip(&self.values) {
            if v.len() != t {
                return Err(Error::invalid(format!("site {} has {} values, expected {t}", s.site_id, v.len())));
            }
            if let Some(x) = v.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
                return Err(Error::invalid(format!("site {} has invalid value {x}", s.site_id)));
            }
        }
        Ok(())
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn n_times(&self) -> usize {
        self.values[0].len()
    }

    pub fn coords(&self) -> Vec<[f64; 2]> {
        self.sites.iter().map(|s| [s.lon, s.lat]).collect()
    }

    pub fn series(&self) -> Vec<SiteSeries> {
        self.sites
            .iter()
            .zip(&self.values)
            .map(|(s, v)| SiteSeries { site_id: s.site_id, lon: s.lon, lat: s.lat, values: v.clone() })
            .collect()
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(open(path)?))
}

fn check_header(path: &Path, rdr: &mut csv::Reader<File>, expected: &[&str]) -> Result<()> {
    let h = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?;
    if h.iter().ne(expected.iter().copied()) {
        return Err(parse_err(path, 1, format!("expected header `{}`", expected.join(","))));
    }
    Ok(())
}

fn field<T: std::str::FromStr>(path: &Path, line: usize, rec: &csv::StringRecord, k: usize, name: &str) -> Result<T> {
    let raw = rec.get(k).ok_or_else(|| parse_err(path, line, format!("missing column {name}")))?;
    raw.trim().parse().map_err(|_| parse_err(path, line, format!("cannot parse {name} from `{raw}`")))
}

fn csv_rows(path: &Path, rdr: &mut csv::Reader<File>, width: usize) -> Result<Vec<(usize, csv::StringRecord)>> {
    let mut out = Vec::new();
    for r in rdr.records() {
        let rec = r.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != width {
            return Err(parse_err(path, line, format!("expected {width} fields, found {}", rec.len())));
        }
        out.push((line, rec));
    }
    Ok(out)
}

/// Read a long-format data file. Sites keep their order of first appearance;
/// each site's `time_index` values must be exactly `0..T`.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let mut rdr = csv_reader(path)?;
    check_header(path, &mut rdr, &DATA_HEADER)?;
    let mut index: HashMap<u64, usize> = HashMap::new();
    let mut sites: Vec<SiteInfo> = Vec::new();
    let mut cells: Vec<HashMap<usize, f64>> = Vec::new();
    for (line, rec) in csv_rows(path, &mut rdr, 5)? {
        let site_id: u64 = field(path, line, &rec, 0, "site_id")?;
        let lon: f64 = field(path, line, &rec, 1, "lon")?;
        let lat: f64 = field(path, line, &rec, 2, "lat")?;
        let t: usize = field(path, line, &rec, 3, "time_index")?;
        let v: f64 = field(path, line, &rec, 4, "value")?;
        if !(lon.is_finite() && lat.is_finite()) {
            return Err(parse_err(path, line, "non-finite coordinate"));
        }
        if !v.is_finite() {
            return Err(parse_err(path, line, format!("non-finite value {v}")));
        }
        if v < 0.0 {
            return Err(parse_err(path, line, format!("negative value {v}")));
        }
        let i = *index.entry(site_id).or_insert_with(|| {
            sites.push(SiteInfo { site_id, lon, lat });
            cells.push(HashMap::new());
            sites.len() - 1
        });
        if sites[i].lon != lon || sites[i].lat != lat {
            return Err(parse_err(path, line, format!("site {site_id} changes coordinates")));
        }
        if cells[i].insert(t, v).is_some() {
            return Err(parse_err(path, line, format!("duplicate (site_id, time_index) = ({site_id}, {t})")));
        }
    }
    if sites.is_empty() {
        return Err(parse_err(path, 1, "no data rows"));
    }
    let t = cells[0].len();
    let mut values = Vec::with_capacity(sites.len());
    for (s, c) in sites.iter().zip(&cells) {
        if c.len() != t {
            return Err(Error::invalid(format!("{}: site {} has {} time steps, expected {t}", path.display(), s.site_id, c.len())));
        }
        let v = (0..t)
            .map(|k| c.get(&k).copied())
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| Error::invalid(format!("{}: site {} time_index is not 0..{t}", path.display(), s.site_id)))?;
        values.push(v);
    }
    Dataset::new(sites, values)
}

/// Canonical layout: sites in order, time ascending.
pub fn write_dataset(path: &Path, d: &Dataset) -> Result<()> {
    d.validate()?;
    let mut w = create(path)?;
    let res = (|| -> std::io::Result<()> {
        writeln!(w, "{}", DATA_HEADER.join(","))?;
        for (s, v) in d.sites.iter().zip(&d.values) {
            let (lon, lat) = (fmt_f64(s.lon), fmt_f64(s.lat));
            for (t, x) in v.iter().enumerate() {
                writeln!(w, "{},{lon},{lat},{t},{}", s.site_id, fmt_f64(*x))?;
            }
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn write_fits(path: &Path, fits: &[FitRecord]) -> Result<()> {
    let mut w = create(path)?;
    let res = (|| -> std::io::Result<()> {
        writeln!(w, "{}", FITS_HEADER.join(","))?;
        for f in fits {
            let e = f.eta_hat.to_array();
            let q = &f.info;
            let nums: Vec<String> = [f.lon, f.lat, f.threshold]
                .iter()
                .map(|v| fmt_f64(*v))
                .chain(std::iter::once(f.n_exceedances.to_string()))
                .chain(e.iter().map(|v| fmt_f64(*v)))
                .chain([q[(0, 0)], q[(0, 1)], q[(0, 2)], q[(1, 1)], q[(1, 2)], q[(2, 2)]].iter().map(|v| fmt_f64(*v)))
                .collect();
            writeln!(w, "{},{}", f.site_id, nums.join(","))?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn read_fits(path: &Path) -> Result<Vec<FitRecord>> {
    let mut rdr = csv_reader(path)?;
    check_header(path, &mut rdr, &FITS_HEADER)?;
    let mut out = Vec::new();
    for (line, rec) in csv_rows(path, &mut rdr, FITS_HEADER.len())? {
        let num = |k: usize| -> Result<f64> {
            let v: f64 = field(path, line, &rec, k, FITS_HEADER[k])?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(parse_err(path, line, format!("non-finite {}", FITS_HEADER[k])))
            }
        };
        let (q11, q12, q13, q22, q23, q33) = (num(8)?, num(9)?, num(10)?, num(11)?, num(12)?, num(13)?);
        out.push(FitRecord {
            site_id: field(path, line, &rec, 0, "site_id")?,
            lon: num(1)?,
            lat: num(2)?,
            threshold: num(3)?,
            n_exceedances: field(path, line, &rec, 4, "n_exceedances")?,
            eta_hat: TransformedParameters::new(num(5)?, num(6)?, num(7)?),
            info: Matrix3::new(q11, q12, q13, q12, q22, q23, q13, q23, q33),
        });
    }
    if out.is_empty() {
        return Err(parse_err(path, 1, "no fitted sites"));
    }
    Ok(out)
}

pub fn write_exclusions(path: &Path, exclusions: &[Exclusion]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    let io = |e: csv::Error| Error::invalid(format!("{}: {e}", path.display()));
    w.write_record(EXCLUSIONS_HEADER).map_err(io)?;
    for x in exclusions {
        w.write_record([x.site_id.to_string(), fmt_f64(x.lon), fmt_f64(x.lat), x.reason.clone()]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_exclusions(path: &Path) -> Result<Vec<Exclusion>> {
    let mut rdr = csv_reader(path)?;
    check_header(path, &mut rdr, &EXCLUSIONS_HEADER)?;
    csv_rows(path, &mut rdr, 4)?
        .into_iter()
        .map(|(line, rec)| {
            Ok(Exclusion {
                site_id: field(path, line, &rec, 0, "site_id")?,
                lon: field(path, line, &rec, 1, "lon")?,
                lat: field(path, line, &rec, 2, "lat")?,
                reason: rec[3].to_string(),
            })
        })
        .collect()
}

/// Binary draws: magic `EXLGMDR1`, then little-endian `u64` rows, columns,
/// `n_sites`, `n_nodes`, seed, the `f64` acceptance rate, and the draws row
/// by row (7 hyperparameters followed by the latent vector).
pub fn write_draws(path: &Path, s: &PosteriorSamples) -> Result<()> {
    let mut w = create(path)?;
    let cols = 7 + s.latent_draws.ncols();
    let res = (|| -> std::io::Result<()> {
        w.write_all(DRAWS_MAGIC)?;
        for v in [s.n_draws() as u64, cols as u64, s.n_sites as u64, s.n_nodes as u64, s.seed] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&s.acceptance_rate.to_le_bytes())?;
        for k in 0..s.n_draws() {
            for v in s.theta_draws.row(k).iter().chain(s.latent_draws.row(k)) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn read_draws(path: &Path) -> Result<PosteriorSamples> {
    let mut r = BufReader::new(open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::invalid(format!("{}: {msg}", path.display()));
    if bytes.len() < 56 || &bytes[..8] != DRAWS_MAGIC {
        return Err(bad("not a draws file"));
    }
    let word = |k: usize| u64::from_le_bytes(bytes[8 + 8 * k..16 + 8 * k].try_into().expect("8 bytes"));
    let (rows, cols, n_sites, n_nodes, seed) = (word(0) as usize, word(1) as usize, word(2) as usize, word(3) as usize, word(4));
    let acceptance_rate = f64::from_le_bytes(bytes[48..56].try_into().expect("8 bytes"));
    if cols != 7 + 3 * n_sites + 3 + 2 * n_nodes || bytes.len() != 56 + 8 * rows * cols {
        return Err(bad("inconsistent dimensions"));
    }
    let vals: Vec<f64> = bytes[56..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let mut theta = Vec::with_capacity(7 * rows);
    let mut latent = Vec::with_capacity((cols - 7) * rows);
    for row in vals.chunks_exact(cols) {
        theta.extend_from_slice(&row[..7]);
        latent.extend_from_slice(&row[7..]);
    }
    Ok(PosteriorSamples {
        n_sites,
        n_nodes,
        theta_draws: DrawMatrix::new(rows, 7, theta)?,
        latent_draws: DrawMatrix::new(rows, cols - 7, latent)?,
        acceptance_rate,
        seed,
        warnings: Vec::new(),
    })
}

/// CSV variant of the draws: 7 hyperparameter columns, then `x0, x1, ...`.
pub fn write_draws_csv(path: &Path, s: &PosteriorSamples) -> Result<()> {
    let mut w = create(path)?;
    let res = (|| -> std::io::Result<()> {
        let mut header: Vec<String> = HyperParameters::NAMES.iter().map(|s| s.to_string()).collect();
        header.extend((0..s.latent_draws.ncols()).map(|j| format!("x{j}")));
        writeln!(w, "{}", header.join(","))?;
        for k in 0..s.n_draws() {
            let row: Vec<String> = s.theta_draws.row(k).iter().chain(s.latent_draws.row(k)).map(|v| fmt_f64(*v)).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// Return-level rows `(site_id, lon, lat, M, mean, sd, q025, q975)`;
/// `sites[k]` describes site index `k`.
pub fn write_return_levels(path: &Path, sites: &[SiteInfo], levels: &[ReturnLevel]) -> Result<()> {
    let mut w = create(path)?;
    let res = (|| -> std::io::Result<()> {
        writeln!(w, "site_id,lon,lat,M,mean,sd,q025,q975")?;
        for r in levels {
            let s = &sites[r.site];
            let nums: Vec<String> = [s.lon, s.lat, r.period, r.mean, r.sd, r.q025, r.q975].iter().map(|v| fmt_f64(*v)).collect();
            writeln!(w, "{},{}", s.site_id, nums.join(","))?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn write_predictive(path: &Path, sites: &[SiteInfo], draws: &[Vec<f64>]) -> Result<()> {
    let mut w = create(path)?;
    let res = (|| -> std::io::Result<()> {
        writeln!(w, "site_id,draw,value")?;
        for (s, d) in sites.iter().zip(draws) {
            for (k, v) in d.iter().enumerate() {
                writeln!(w, "{},{k},{}", s.site_id, fmt_f64(*v))?;
            }
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

/// Empty bins are written with `NA`.
pub fn write_variogram(path: &Path, bins: &[VariogramBin]) -> Result<()> {
    let mut w = create(path)?;
    let res = (|| -> std::io::Result<()> {
        writeln!(w, "bin_center,semivariance,count")?;
        for b in bins {
            let sv = b.semivariance.map_or_else(|| "NA".to_string(), fmt_f64);
            writeln!(w, "{},{sv},{}", fmt_f64(b.center), b.count)?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn write_mesh(path: &Path, mesh: &Mesh) -> Result<()> {
    let mut w = create(path)?;
    let res = (|| -> std::io::Result<()> {
        writeln!(w, "node_id,x,y")?;
        for (k, [x, y]) in mesh.nodes().into_iter().enumerate() {
            writeln!(w, "{k},{},{}", fmt_f64(x), fmt_f64(y))?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}
