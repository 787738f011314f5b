//! Dataset CSV, synthetic benchmarks, run records and SVG reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::distill::Summary;
use crate::distributions::{Domain, LabeledMeasure, MultiDomainDataset};
use crate::eval::{aggregate, Aggregate, RunRecord, RECORD_SCHEMA};
use crate::{Error, Result};

fn csv_error(line: usize, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}

/// Parse the dataset CSV format: `domain,label,f0,…`; the one domain whose
/// labels are all empty is the target. Class indices follow the sorted
/// label strings; domains keep their order of first appearance.
pub fn read_dataset<R: Read>(reader: R) -> Result<MultiDomainDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_error(1, e))?.clone();
    if header.len() < 3 || &header[0] != "domain" || &header[1] != "label" {
        return Err(csv_error(1, "header must start with domain,label and list at least one feature"));
    }
    let d = header.len() - 2;
    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, (Vec<f64>, Vec<String>)> = BTreeMap::new();
    for (i, record) in rdr.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { .. } => Error::InconsistentDim { line },
            _ => csv_error(line, e),
        })?;
        if record.len() != d + 2 {
            return Err(Error::InconsistentDim { line });
        }
        let domain = record[0].to_string();
        let entry = rows.entry(domain.clone()).or_insert_with(|| {
            order.push(domain);
            (Vec::new(), Vec::new())
        });
        for field in record.iter().skip(2) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| csv_error(line, format!("not a number: {field:?}")))?;
            if !v.is_finite() {
                return Err(csv_error(line, "non-finite value"));
            }
            entry.0.push(v);
        }
        entry.1.push(record[1].to_string());
    }
    let mut vocab: Vec<&str> = rows.values().flat_map(|(_, l)| l.iter()).map(String::as_str).collect();
    vocab.retain(|l| !l.is_empty());
    vocab.sort_unstable();
    vocab.dedup();
    let class_names: Vec<String> = vocab.iter().map(|s| s.to_string()).collect();
    let n_classes = class_names.len();
    let mut domains = Vec::with_capacity(order.len());
    for name in order {
        let (values, labels) = rows.remove(&name).expect("domain recorded");
        let n = labels.len();
        let support = Array2::from_shape_vec((n, d), values).expect("row lengths checked");
        let empty = labels.iter().filter(|l| l.is_empty()).count();
        let measure = if empty == n {
            LabeledMeasure::unlabeled(support, n_classes)?
        } else if empty == 0 {
            let idx = labels
                .iter()
                .map(|l| class_names.binary_search(l).expect("label in vocabulary"))
                .collect();
            LabeledMeasure::labeled(support, idx, n_classes)?
        } else {
            return Err(Error::Parse {
                line: 0,
                msg: format!("domain {name:?} mixes labeled and unlabeled rows"),
            });
        };
        domains.push(Domain { name, measure });
    }
    MultiDomainDataset::new(domains, class_names)
}

pub fn load_csv(path: &Path) -> Result<MultiDomainDataset> {
    read_dataset(BufReader::new(fs::File::open(path)?))
}

fn header(d: usize) -> Vec<String> {
    let mut h = vec!["domain".to_string(), "label".to_string()];
    h.extend((0..d).map(|j| format!("f{j}")));
    h
}

fn write_rows<W: Write>(
    w: &mut csv::Writer<W>,
    domain: &str,
    measure: &LabeledMeasure,
    class_names: &[String],
) -> Result<()> {
    for (i, row) in measure.support().outer_iter().enumerate() {
        let mut fields = Vec::with_capacity(row.len() + 2);
        fields.push(domain.to_string());
        fields.push(measure.labels().map_or(String::new(), |l| class_names[l[i]].clone()));
        // `{}` on f64 is the shortest representation that reads back exactly
        fields.extend(row.iter().map(|v| format!("{v}")));
        w.write_record(&fields).map_err(|e| Error::Io(e.into()))?;
    }
    Ok(())
}

pub fn write_dataset<W: Write>(writer: W, dataset: &MultiDomainDataset) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header(dataset.feature_dim())).map_err(|e| Error::Io(e.into()))?;
    for d in dataset.domains() {
        write_rows(&mut w, &d.name, &d.measure, dataset.class_names())?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(path: &Path, dataset: &MultiDomainDataset) -> Result<()> {
    write_dataset(BufWriter::new(fs::File::create(path)?), dataset)
}

/// A summary in the dataset format, with domain `summary:<method>`.
pub fn save_summary_csv(path: &Path, summary: &Summary, class_names: &[String]) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(fs::File::create(path)?));
    w.write_record(header(summary.measure.dim())).map_err(|e| Error::Io(e.into()))?;
    write_rows(&mut w, &format!("summary:{}", summary.method), &summary.measure, class_names)?;
    w.flush()?;
    Ok(())
}

/// Hidden target labels, one class name per line.
pub fn save_labels(path: &Path, labels: &[usize], class_names: &[String]) -> Result<()> {
    let mut out = String::new();
    for &l in labels {
        out.push_str(&class_names[l]);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_labels(path: &Path, class_names: &[String]) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            class_names
                .iter()
                .position(|c| c == l.trim())
                .ok_or_else(|| csv_error(i + 1, format!("unknown class {l:?}")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftSpec {
    pub rotation_max_deg: f64,
    pub translation_scale: f64,
    pub scale_jitter: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            rotation_max_deg: 15.0,
            translation_scale: 1.0,
            scale_jitter: 0.1,
        }
    }
}

impl ShiftSpec {
    pub fn none() -> Self {
        Self {
            rotation_max_deg: 0.0,
            translation_scale: 0.0,
            scale_jitter: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n_domains: usize,
    pub n_classes: usize,
    pub d: usize,
    pub samples_per_domain: usize,
    pub shift: ShiftSpec,
    pub class_sep: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_domains: 4,
            n_classes: 5,
            d: 8,
            samples_per_domain: 2000,
            shift: ShiftSpec::default(),
            class_sep: 3.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let s = &self.shift;
        if self.n_domains < 2 || self.n_classes < 2 || self.d < 2 {
            return Err(Error::ConfigInvalid(
                "synthetic data needs at least 2 domains, 2 classes and 2 features".into(),
            ));
        }
        if self.samples_per_domain < self.n_classes {
            return Err(Error::ConfigInvalid("samples_per_domain must cover every class".into()));
        }
        if !(self.class_sep > 0.0) || !(self.noise >= 0.0) {
            return Err(Error::ConfigInvalid("class_sep must be positive, noise nonnegative".into()));
        }
        if !(s.rotation_max_deg >= 0.0 && s.translation_scale >= 0.0 && (0.0..1.0).contains(&s.scale_jitter)) {
            return Err(Error::ConfigInvalid(
                "shift needs nonnegative rotation and translation, scale_jitter in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

fn gaussian_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// Gram-Schmidt on the rows of a Gaussian matrix; rows beyond `d` are only
/// normalized.
fn orthonormal_rows<R: Rng>(k: usize, d: usize, rng: &mut R) -> Array2<f64> {
    let mut m = gaussian_matrix(k, d, rng);
    for i in 0..k {
        for j in 0..i.min(d) {
            let proj = m.row(i).dot(&m.row(j));
            let rj = m.row(j).to_owned();
            m.row_mut(i).scaled_add(-proj, &rj);
        }
        let norm = m.row(i).dot(&m.row(i)).sqrt();
        m.row_mut(i).mapv_inplace(|v| v / norm);
    }
    m
}

/// Rotation by `theta` in a random 2-plane.
fn plane_rotation<R: Rng>(d: usize, theta: f64, rng: &mut R) -> Array2<f64> {
    let uv = orthonormal_rows(2, d, rng);
    let (u, v) = (uv.row(0), uv.row(1));
    let mut r = Array2::<f64>::eye(d);
    for i in 0..d {
        for j in 0..d {
            r[[i, j]] += (theta.cos() - 1.0) * (u[i] * u[j] + v[i] * v[j]) + theta.sin() * (v[i] * u[j] - u[i] * v[j]);
        }
    }
    r
}

/// Gaussian class blobs at `class_sep`-scaled orthonormal directions, each
/// domain rotated, scaled per axis and translated. The last domain is the
/// target; its labels come back separately.
pub fn gen_synth(spec: &SynthSpec) -> Result<(MultiDomainDataset, Vec<usize>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n_c, d, n) = (spec.n_classes, spec.d, spec.samples_per_domain);
    let centers = orthonormal_rows(n_c, d, &mut rng) * spec.class_sep;
    let width = (n_c - 1).to_string().len();
    let class_names: Vec<String> = (0..n_c).map(|c| format!("c{c:0width$}")).collect();
    let mut domains = Vec::with_capacity(spec.n_domains);
    let mut hidden = Vec::new();
    for k in 0..spec.n_domains {
        let theta = spec.shift.rotation_max_deg.to_radians() * rng.random::<f64>();
        let rot = plane_rotation(d, theta, &mut rng);
        let dir = orthonormal_rows(1, d, &mut rng).row(0).to_owned();
        let t: Array1<f64> = dir * spec.shift.translation_scale;
        let j = spec.shift.scale_jitter;
        let scale: Array1<f64> = (0..d).map(|_| 1.0 - j + 2.0 * j * rng.random::<f64>()).collect();
        let mut labels: Vec<usize> = (0..n).map(|i| i % n_c).collect();
        labels.shuffle(&mut rng);
        let mut x = gaussian_matrix(n, d, &mut rng) * spec.noise;
        for (mut row, &l) in x.outer_iter_mut().zip(&labels) {
            row += &centers.row(l);
            let moved = rot.dot(&row) * &scale + &t;
            row.assign(&moved);
        }
        let last = k + 1 == spec.n_domains;
        let measure = if last {
            hidden = labels;
            LabeledMeasure::unlabeled(x, n_c)?
        } else {
            LabeledMeasure::labeled(x, labels, n_c)?
        };
        let name = if last { "target".to_string() } else { format!("source{k}") };
        domains.push(Domain { name, measure });
    }
    Ok((MultiDomainDataset::new(domains, class_names)?, hidden))
}

pub const RECORDS_HEADER: &str = "# otdistill run records, schema 1";

/// JSON lines after a `#` header line; each record is one `write` call.
pub fn write_records(path: &Path, records: &[RunRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "{RECORDS_HEADER}")?;
    for r in records {
        let mut line = serde_json::to_string(r)?;
        line.push('\n');
        w.write_all(line.as_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(trimmed).map_err(|e| csv_error(i + 1, e))?;
        let schema = value.get("schema").and_then(|s| s.as_u64()).unwrap_or(0) as u32;
        if schema != RECORD_SCHEMA {
            return Err(Error::SchemaVersionMismatch {
                expected: RECORD_SCHEMA,
                found: schema,
            });
        }
        out.push(serde_json::from_value(value).map_err(|e| csv_error(i + 1, e))?);
    }
    Ok(out)
}

/// Timing and creation-time sidecar, kept apart from the records so those
/// stay reproducible.
pub fn write_run_meta(path: &Path, records: &[RunRecord]) -> Result<()> {
    let created = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let timings: Vec<serde_json::Value> = records
        .iter()
        .map(|r| {
            serde_json::json!({
                "method": r.method,
                "spc": r.spc,
                "seed": r.seed,
                "train_seconds": r.train_seconds,
                "eval_seconds": r.eval_seconds,
            })
        })
        .collect();
    let meta = serde_json::json!({ "created_unix": created, "timings": timings });
    fs::write(path, serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

pub fn write_aggregate_csv(path: &Path, rows: &[Aggregate]) -> Result<()> {
    let mut out = String::from("method,spc,mean_acc,ci95,n_seeds\n");
    for a in rows {
        writeln!(out, "{},{},{},{},{}", a.method, a.spc, a.mean_acc, a.ci95, a.n_seeds).expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Accuracy against SPC (log x axis), one polyline per method with 95% CI
/// whiskers. Output depends only on `rows`.
pub fn render_svg(title: &str, rows: &[Aggregate]) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 170.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let rows: Vec<&Aggregate> = rows.iter().filter(|a| a.mean_acc.is_finite()).collect();
    let min_spc = rows.iter().map(|a| a.spc).min().unwrap_or(1).max(1) as f64;
    let max_spc = rows.iter().map(|a| a.spc).max().unwrap_or(1).max(1) as f64;
    let (lo, hi) = if max_spc > min_spc {
        (min_spc.log10(), max_spc.log10())
    } else {
        (min_spc.log10() - 0.5, min_spc.log10() + 0.5)
    };
    let sx = |spc: usize| left + pw * ((spc.max(1) as f64).log10() - lo) / (hi - lo);
    let sy = |acc: f64| top + ph * (1.0 - acc.clamp(0.0, 1.0));

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="24" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(
        s,
        r##"<rect x="{left:.2}" y="{top:.2}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="#444"/>"##
    );
    for i in 0..=5 {
        let acc = i as f64 / 5.0;
        let y = sy(acc);
        let _ = writeln!(
            s,
            r##"<line x1="{left:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{acc:.1}</text>"##,
            left + pw,
            left - 6.0,
            y + 4.0
        );
    }
    let mut ticks: Vec<usize> = rows.iter().map(|a| a.spc).collect();
    ticks.sort_unstable();
    ticks.dedup();
    for spc in &ticks {
        let x = sx(*spc);
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{spc}</text>"#,
            top + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">samples per class (log scale)</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">target accuracy</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );

    let mut methods = Vec::new();
    for a in &rows {
        if !methods.contains(&a.method) {
            methods.push(a.method);
        }
    }
    for (i, method) in methods.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut pts: Vec<&&Aggregate> = rows.iter().filter(|a| a.method == *method).collect();
        pts.sort_by_key(|a| a.spc);
        let coords: Vec<String> = pts.iter().map(|a| format!("{:.2},{:.2}", sx(a.spc), sy(a.mean_acc))).collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            coords.join(" ")
        );
        for a in pts {
            let (x, y) = (sx(a.spc), sy(a.mean_acc));
            let (y0, y1) = (sy(a.mean_acc - a.ci95), sy(a.mean_acc + a.ci95));
            let _ = writeln!(
                s,
                r#"<line x1="{x:.2}" y1="{y0:.2}" x2="{x:.2}" y2="{y1:.2}" stroke="{color}"/><line x1="{:.2}" y1="{y0:.2}" x2="{:.2}" y2="{y0:.2}" stroke="{color}"/><line x1="{:.2}" y1="{y1:.2}" x2="{:.2}" y2="{y1:.2}" stroke="{color}"/><circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#,
                x - 4.0,
                x + 4.0,
                x - 4.0,
                x + 4.0
            );
        }
        let ly = top + 14.0 + 20.0 * i as f64;
        let lx = left + pw + 16.0;
        let _ = writeln!(
            s,
            r#"<g class="legend"><line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text></g>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            method
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Per benchmark: `<benchmark>_aggregate.csv` and `<benchmark>.svg`.
pub fn emit_report(records: &[RunRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut by_bench: BTreeMap<&str, Vec<RunRecord>> = BTreeMap::new();
    for r in records {
        by_bench.entry(&r.benchmark).or_default().push(r.clone());
    }
    if by_bench.is_empty() {
        return Err(Error::ConfigInvalid("no records to report".into()));
    }
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (bench, recs) in by_bench {
        let rows = aggregate(&recs);
        let stem = file_stem(bench);
        let csv_path = out_dir.join(format!("{stem}_aggregate.csv"));
        write_aggregate_csv(&csv_path, &rows)?;
        let svg_path = out_dir.join(format!("{stem}.svg"));
        fs::write(&svg_path, render_svg(bench, &rows))?;
        written.push(csv_path);
        written.push(svg_path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::Method;
    use crate::ot::linear_mmd;

    const SMALL: &str = "domain,label,f0,f1\na,x,1.5,2\nb,,0.25,-3\n";

    #[test]
    fn parse_two_rows() {
        let ds = read_dataset(SMALL.as_bytes()).unwrap();
        assert_eq!(ds.domains().len(), 2);
        assert_eq!(ds.target_name(), "b");
        assert_eq!(ds.domains()[0].measure.len(), 1);
        assert_eq!(ds.target().support()[[0, 1]], -3.0);
    }

    #[test]
    fn parse_errors() {
        let two_targets = "domain,label,f0\na,,1\nb,,2\nc,x,3\n";
        assert!(matches!(
            read_dataset(two_targets.as_bytes()),
            Err(Error::MultipleUnlabeledDomains(..))
        ));
        let ragged = "domain,label,f0,f1\na,x,1,2\nb,,3\n";
        assert!(matches!(read_dataset(ragged.as_bytes()), Err(Error::InconsistentDim { line: 3 })));
        let bad = "domain,label,f0\na,x,1\nb,,zz\n";
        assert!(matches!(read_dataset(bad.as_bytes()), Err(Error::Parse { line: 3, .. })));
        let nan = "domain,label,f0\na,x,NaN\nb,,1\n";
        assert!(matches!(read_dataset(nan.as_bytes()), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn labels_sorted_lexicographically() {
        let text = "domain,label,f0\na,zeta,1\na,alpha,2\nt,,0\n";
        let ds = read_dataset(text.as_bytes()).unwrap();
        assert_eq!(ds.class_names(), ["alpha", "zeta"]);
        assert_eq!(ds.domains()[0].measure.labels().unwrap(), [1, 0]);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let spec = SynthSpec {
            samples_per_domain: 50,
            ..SynthSpec::default()
        };
        let (ds, _) = gen_synth(&spec).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        let back = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back.class_names(), ds.class_names());
        for (a, b) in ds.domains().iter().zip(back.domains()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.measure, b.measure);
        }
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let spec = SynthSpec {
            samples_per_domain: 103,
            ..SynthSpec::default()
        };
        let write = || {
            let (ds, hidden) = gen_synth(&spec).unwrap();
            let mut buf = Vec::new();
            write_dataset(&mut buf, &ds).unwrap();
            (buf, hidden)
        };
        let (a, ha) = write();
        let (b, hb) = write();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        let (ds, hidden) = gen_synth(&spec).unwrap();
        for d in ds.sources() {
            let counts = d.measure.class_counts().unwrap();
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1);
        }
        assert_eq!(hidden.len(), 103);
        assert_eq!(ds.target_name(), "target");
    }

    #[test]
    fn pure_translation_moves_class_means() {
        // two domains, no rotation or scale: target means = source means + (t_T - t_S)
        let spec = SynthSpec {
            n_domains: 2,
            samples_per_domain: 10_000,
            shift: ShiftSpec {
                rotation_max_deg: 0.0,
                translation_scale: 2.0,
                scale_jitter: 0.0,
            },
            ..SynthSpec::default()
        };
        let (ds, hidden) = gen_synth(&spec).unwrap();
        let target = LabeledMeasure::labeled(ds.target().support().clone(), hidden, ds.n_classes()).unwrap();
        let src = crate::distributions::class_means(&ds.domains()[0].measure).unwrap();
        let tgt = crate::distributions::class_means(&target).unwrap();
        let shift = &tgt.means.row(0) - &src.means.row(0);
        // both translations have norm 2
        assert!(shift.dot(&shift).sqrt() <= 4.0 + 0.1);
        for c in 1..ds.n_classes() {
            let sc = &tgt.means.row(c) - &src.means.row(c);
            // every class moves by the same vector, up to sampling error
            assert!((&sc - &shift).iter().all(|v| v.abs() < 0.15), "class {c}");
        }
    }

    #[test]
    fn larger_translation_larger_mmd() {
        let mut votes = 0;
        for seed in 0..5 {
            let mmd = |scale: f64| {
                let spec = SynthSpec {
                    n_domains: 2,
                    samples_per_domain: 500,
                    shift: ShiftSpec {
                        translation_scale: scale,
                        ..ShiftSpec::default()
                    },
                    seed,
                    ..SynthSpec::default()
                };
                let (ds, _) = gen_synth(&spec).unwrap();
                linear_mmd(&ds.domains()[0].measure, ds.target()).unwrap()
            };
            if mmd(0.5) < mmd(1.0) && mmd(1.0) < mmd(2.0) {
                votes += 1;
            }
        }
        assert!(votes >= 4, "{votes}");
    }

    fn record(method: Method, spc: usize, seed: u64, acc: f64) -> RunRecord {
        RunRecord {
            schema: RECORD_SCHEMA,
            benchmark: "bench".into(),
            target: "target".into(),
            method,
            spc,
            seed,
            accuracy: Some(acc),
            error: None,
            diagnostics: serde_json::json!({"k": [1.0, 0.1]}),
            train_seconds: 0.0,
            eval_seconds: 0.0,
        }
    }

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        write_records(&path, &[]).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), format!("{RECORDS_HEADER}\n"));
        assert!(read_records(&path).unwrap().is_empty());
        let recs = vec![
            record(Method::Wbt, 1, 0, 0.5),
            record(Method::Wbt, 1, 1, 0.1 + 0.2),
            record(Method::Dadil, 10, 0, 1.0),
        ];
        write_records(&path, &recs).unwrap();
        assert_eq!(read_records(&path).unwrap(), recs);
    }

    #[test]
    fn corrupt_record_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.jsonl");
        write_records(&path, &[record(Method::Wbt, 1, 0, 0.5)]).unwrap();
        let mut text = fs::read_to_string(&path).unwrap();
        text.push_str("{not json\n");
        fs::write(&path, text).unwrap();
        assert!(matches!(read_records(&path), Err(Error::Parse { line: 3, .. })));
        fs::write(&path, "{\"schema\": 2}\n").unwrap();
        assert!(matches!(read_records(&path), Err(Error::SchemaVersionMismatch { found: 2, .. })));
    }

    #[test]
    fn svg_shapes() {
        let recs: Vec<RunRecord> = [1, 10, 50].iter().map(|&s| record(Method::Wbt, s, 0, 0.5)).collect();
        let svg = render_svg("b", &aggregate(&recs));
        assert_eq!(svg.matches("<polyline").count(), 1);
        let points = svg.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(points.split(' ').count(), 3);

        let mut two = recs.clone();
        two.push(record(Method::RandomSource, 1, 0, 0.3));
        let svg = render_svg("b", &aggregate(&two));
        assert_eq!(svg.matches("class=\"legend\"").count(), 2);
        assert_eq!(svg, render_svg("b", &aggregate(&two)));
    }

    #[test]
    fn report_files_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let recs = vec![record(Method::Wbt, 1, 0, 0.5), record(Method::Wbt, 1, 1, 0.7)];
        let files = emit_report(&recs, dir.path()).unwrap();
        let first: Vec<Vec<u8>> = files.iter().map(|p| fs::read(p).unwrap()).collect();
        emit_report(&recs, dir.path()).unwrap();
        let second: Vec<Vec<u8>> = files.iter().map(|p| fs::read(p).unwrap()).collect();
        assert_eq!(first, second);
        let csv = String::from_utf8(first[0].clone()).unwrap();
        assert!(csv.starts_with("method,spc,mean_acc,ci95,n_seeds\nwbt,1,0.6,"));
    }
}
