//! Checkpoints, CSV tables, SVG curves and run manifests.
//!
//! Every file is written atomically: the bytes go to a temporary sibling
//! which is then renamed over the destination.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{AttackKind, SweepRecord};
use crate::nn::{ModelSpec, ModelState, Param};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ADVW";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const CSV_HEADER: &str = "epsilon,top1_error,top5_error,mean_l2,success_rate,attack";

/// Writes `bytes` to a temporary file next to `path`, then renames it.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("`{}` is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Checkpoints

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

/// `ADVW`, version, descriptor, then one record per parameter in spec order:
/// name, rank, dims, values. All integers are u32 and all values f64, little
/// endian.
pub fn encode_checkpoint(state: &ModelState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_str(&mut out, &state.spec.to_string());
    for p in &state.params {
        put_str(&mut out, &p.name);
        put_u32(&mut out, p.value.rank() as u32);
        for &d in p.value.shape() {
            put_u32(&mut out, d as u32);
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Truncated {
                what: "checkpoint",
                needed: end,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, what: &'static str) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Malformed {
            what,
            detail: e.to_string(),
        })
    }
}

/// Parses checkpoint bytes. With `expected`, a checkpoint for any other
/// architecture is refused before its parameters are read.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelSpec>) -> Result<ModelState> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            what: "checkpoint",
            expected: u32::from_be_bytes(CHECKPOINT_MAGIC),
            found: u32::from_be_bytes(magic.try_into().expect("4 bytes")),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let descriptor = r.string("checkpoint descriptor")?;
    if let Some(spec) = expected {
        let want = spec.to_string();
        if want != descriptor {
            return Err(Error::DescriptorMismatch {
                expected: want,
                found: descriptor,
            });
        }
    }
    let spec: ModelSpec = descriptor.parse()?;
    let mut params = Vec::new();
    for (name, shape) in spec.param_shapes()? {
        let found = r.string("parameter name")?;
        if found != name {
            return Err(Error::Malformed {
                what: "checkpoint",
                detail: format!("expected parameter `{name}`, found `{found}`"),
            });
        }
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if dims != shape {
            return Err(Error::Malformed {
                what: "checkpoint",
                detail: format!("`{name}` has shape {dims:?}, spec needs {shape:?}"),
            });
        }
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(Param {
            name,
            value: Tensor::new(shape, data)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Malformed {
            what: "checkpoint",
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(ModelState { spec, params, seed: 0 })
}

/// The init seed is not stored; a loaded state reports seed 0.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(state))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    decode_checkpoint(&read(path)?, None)
}

/// Loads a checkpoint only if it was saved for `spec`.
pub fn load_checkpoint_for(path: &Path, spec: &ModelSpec) -> Result<ModelState> {
    decode_checkpoint(&read(path)?, Some(spec))
}

// ---------------------------------------------------------------------------
// CSV

/// ε with four decimals, errors in percent with two, mean L2 with six
/// decimals, success rate as a fraction with four.
pub fn format_csv(records: &[SweepRecord]) -> Result<String> {
    if records.is_empty() {
        return Err(Error::Empty("sweep records"));
    }
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{:.4},{:.2},{:.2},{:.6},{:.4},{}",
            r.epsilon,
            100.0 * r.top1_error,
            100.0 * r.top5_error,
            r.mean_l2,
            r.success_rate,
            r.attack
        )
        .expect("writing to a String");
    }
    Ok(out)
}

pub fn write_csv(records: &[SweepRecord], path: &Path) -> Result<()> {
    write_atomic(path, format_csv(records)?.as_bytes())
}

pub fn parse_csv(text: &str) -> Result<Vec<SweepRecord>> {
    let malformed = |detail: String| Error::Malformed { what: "CSV", detail };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => return Err(malformed(format!("header is {other:?}"))),
    }
    let records = lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(malformed(format!("line {} has {} fields", i + 2, fields.len())));
            }
            let num = |j: usize| {
                fields[j]
                    .parse::<f64>()
                    .map_err(|e| malformed(format!("line {} field {}: {e}", i + 2, j + 1)))
            };
            Ok(SweepRecord {
                epsilon: num(0)?,
                top1_error: num(1)? / 100.0,
                top5_error: num(2)? / 100.0,
                mean_l2: num(3)?,
                success_rate: num(4)?,
                attack: fields[5].parse::<AttackKind>()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if records.is_empty() {
        return Err(Error::Empty("sweep records"));
    }
    Ok(records)
}

pub fn read_csv(path: &Path) -> Result<Vec<SweepRecord>> {
    let bytes = read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Malformed {
        what: "CSV",
        detail: e.to_string(),
    })?;
    parse_csv(&text)
}

// ---------------------------------------------------------------------------
// SVG

/// Which column of the records a curve plots, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Series {
    Top1Error,
    Top5Error,
    Top1Accuracy,
}

impl Series {
    pub fn value(self, r: &SweepRecord) -> f64 {
        100.0
            * match self {
                Series::Top1Error => r.top1_error,
                Series::Top5Error => r.top5_error,
                Series::Top1Accuracy => 1.0 - r.top1_error,
            }
    }

    pub fn label(self) -> &'static str {
        match self {
            Series::Top1Error => "top-1 error (%)",
            Series::Top5Error => "top-5 error (%)",
            Series::Top1Accuracy => "top-1 accuracy (%)",
        }
    }
}

impl std::str::FromStr for Series {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top1" => Ok(Series::Top1Error),
            "top5" => Ok(Series::Top5Error),
            "accuracy" => Ok(Series::Top1Accuracy),
            other => Err(Error::Config(format!("unknown series `{other}` (top1, top5, accuracy)"))),
        }
    }
}

pub const SVG_WIDTH: f64 = 640.0;
pub const SVG_HEIGHT: f64 = 400.0;
/// Plot area: x in `[PLOT_LEFT, PLOT_RIGHT]`, y in `[PLOT_TOP, PLOT_BOTTOM]`.
pub const PLOT_LEFT: f64 = 70.0;
pub const PLOT_RIGHT: f64 = 610.0;
pub const PLOT_TOP: f64 = 30.0;
pub const PLOT_BOTTOM: f64 = 340.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Pixel row of a percentage: 0 % at the bottom edge, 100 % at the top.
pub fn y_pixel(percent: f64) -> f64 {
    PLOT_BOTTOM - (PLOT_BOTTOM - PLOT_TOP) * percent / 100.0
}

/// Pixel column of ε when the axis spans `[0, x_max]`.
pub fn x_pixel(epsilon: f64, x_max: f64) -> f64 {
    PLOT_LEFT + (PLOT_RIGHT - PLOT_LEFT) * epsilon / x_max
}

/// Right end of the ε axis: the largest ε of any curve, or 1 if all are 0.
pub fn x_extent(curves: &[(String, Vec<SweepRecord>)]) -> f64 {
    let m = curves
        .iter()
        .flat_map(|(_, rs)| rs.iter().map(|r| r.epsilon))
        .fold(0.0, f64::max);
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// A standalone SVG 1.1 document with one polyline per named curve.
pub fn svg_document(curves: &[(String, Vec<SweepRecord>)], series: Series) -> Result<String> {
    if curves.is_empty() {
        return Err(Error::Empty("curve list"));
    }
    if let Some((name, _)) = curves.iter().find(|(_, rs)| rs.is_empty()) {
        return Err(Error::Config(format!("curve `{name}` has no records")));
    }
    let x_max = x_extent(curves);
    let mut s = String::new();
    let w = &mut s;
    let _ = writeln!(w, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{SVG_WIDTH}" height="{SVG_HEIGHT}" viewBox="0 0 {SVG_WIDTH} {SVG_HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(w, r#"<rect width="{SVG_WIDTH}" height="{SVG_HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        w,
        r#"<g class="axes" stroke="black" fill="none"><line x1="{PLOT_LEFT}" y1="{PLOT_BOTTOM}" x2="{PLOT_RIGHT}" y2="{PLOT_BOTTOM}"/><line x1="{PLOT_LEFT}" y1="{PLOT_TOP}" x2="{PLOT_LEFT}" y2="{PLOT_BOTTOM}"/></g>"#
    );
    let _ = writeln!(w, r#"<g class="ticks">"#);
    for i in 0..=4 {
        let pct = 25.0 * i as f64;
        let y = y_pixel(pct);
        let _ = writeln!(
            w,
            r##"<line x1="{:.2}" y1="{y:.2}" x2="{PLOT_LEFT}" y2="{y:.2}" stroke="black"/><line x1="{PLOT_LEFT}" y1="{y:.2}" x2="{PLOT_RIGHT}" y2="{y:.2}" stroke="#dddddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{pct}</text>"##,
            PLOT_LEFT - 5.0,
            PLOT_LEFT - 8.0,
            y + 4.0
        );
        let eps = x_max * i as f64 / 4.0;
        let x = x_pixel(eps, x_max);
        let _ = writeln!(
            w,
            r#"<line x1="{x:.2}" y1="{PLOT_BOTTOM}" x2="{x:.2}" y2="{:.2}" stroke="black"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{eps:.3}</text>"#,
            PLOT_BOTTOM + 5.0,
            PLOT_BOTTOM + 18.0
        );
    }
    let _ = writeln!(w, "</g>");
    let _ = writeln!(
        w,
        r#"<text class="x-label" x="{:.2}" y="{:.2}" text-anchor="middle">epsilon (fraction of pixel range)</text>"#,
        (PLOT_LEFT + PLOT_RIGHT) / 2.0,
        SVG_HEIGHT - 15.0
    );
    let _ = writeln!(
        w,
        r#"<text class="y-label" x="20" y="{:.2}" text-anchor="middle" transform="rotate(-90 20 {:.2})">{}</text>"#,
        (PLOT_TOP + PLOT_BOTTOM) / 2.0,
        (PLOT_TOP + PLOT_BOTTOM) / 2.0,
        series.label()
    );
    for (i, (_, records)) in curves.iter().enumerate() {
        let points: Vec<String> = records
            .iter()
            .map(|r| format!("{:.2},{:.2}", x_pixel(r.epsilon, x_max), y_pixel(series.value(r))))
            .collect();
        let _ = writeln!(
            w,
            r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
            PALETTE[i % PALETTE.len()],
            points.join(" ")
        );
    }
    let _ = writeln!(w, r#"<g class="legend">"#);
    for (i, (name, _)) in curves.iter().enumerate() {
        let y = PLOT_TOP + 10.0 + 16.0 * i as f64;
        let x = PLOT_RIGHT - 150.0;
        let _ = writeln!(
            w,
            r#"<line x1="{x:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            x + 20.0,
            PALETTE[i % PALETTE.len()],
            x + 26.0,
            y + 4.0,
            escape(name)
        );
    }
    let _ = writeln!(w, "</g>");
    let _ = writeln!(w, "</svg>");
    Ok(s)
}

pub fn render_svg(curves: &[(String, Vec<SweepRecord>)], series: Series, path: &Path) -> Result<()> {
    write_atomic(path, svg_document(curves, series)?.as_bytes())
}

// ---------------------------------------------------------------------------
// Manifests

/// Everything needed to rerun a command. Holds no timestamps or host data,
/// so identical runs produce identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Arguments after the program name.
    pub argv: Vec<String>,
    pub seed: u64,
    /// SHA-256 of the dataset the command read, if any.
    pub dataset_fingerprint: Option<String>,
    pub config: BTreeMap<String, serde_json::Value>,
    pub tool_version: String,
}

impl RunManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Malformed {
            what: "manifest",
            detail: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read(path)?;
        Self::from_json(&String::from_utf8_lossy(&bytes))
    }
}

/// `<output>.manifest.json`, the manifest path belonging to an output file.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    output.with_file_name(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_params, reference_spec};

    fn rec(epsilon: f64, top1: f64, top5: f64) -> SweepRecord {
        SweepRecord {
            epsilon,
            top1_error: top1,
            top5_error: top5,
            mean_l2: 0.5,
            success_rate: top1,
            attack: AttackKind::Fgsm,
        }
    }

    #[test]
    fn csv_row_format() {
        let text = format_csv(&[rec(0.02, 0.8762, 0.4958)]).unwrap();
        assert_eq!(
            text,
            "epsilon,top1_error,top5_error,mean_l2,success_rate,attack\n0.0200,87.62,49.58,0.500000,0.8762,fgsm\n"
        );
        let back = parse_csv(&text).unwrap();
        assert!((back[0].top1_error - 0.8762).abs() < 1e-12);
        assert_eq!(back[0].attack, AttackKind::Fgsm);
    }

    #[test]
    fn empty_csv_is_refused_without_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        assert!(matches!(write_csv(&[], &path), Err(Error::Empty(_))));
        assert!(!path.exists());
    }

    #[test]
    fn checkpoint_errors_are_distinct() {
        let spec = reference_spec("mlp", &[1, 8, 8], 6).unwrap();
        let m = init_params(&spec, 3).unwrap();
        let bytes = encode_checkpoint(&m);
        assert_eq!(decode_checkpoint(&bytes, Some(&spec)).unwrap().params, m.params);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad, None), Err(Error::BadMagic { .. })));

        let mut newer = bytes.clone();
        newer[4] = 2;
        assert!(matches!(decode_checkpoint(&newer, None), Err(Error::UnsupportedVersion(2))));

        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3], None),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(decode_checkpoint(&bytes[..2], None), Err(Error::Truncated { .. })));

        let other = reference_spec("student-cnn", &[1, 8, 8], 6).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes, Some(&other)),
            Err(Error::DescriptorMismatch { .. })
        ));
    }

    #[test]
    fn svg_y_is_affine_in_the_error() {
        let curves = vec![
            ("a".to_string(), vec![rec(0.0, 0.0, 0.0), rec(0.05, 0.5, 0.2), rec(0.1, 1.0, 0.4)]),
            ("b<&>".to_string(), vec![rec(0.1, 0.25, 0.1)]),
        ];
        let svg = svg_document(&curves, Series::Top1Error).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("b&lt;&amp;&gt;"));
        let expected = format!(
            "points=\"{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}\"",
            PLOT_LEFT,
            PLOT_BOTTOM,
            (PLOT_LEFT + PLOT_RIGHT) / 2.0,
            (PLOT_TOP + PLOT_BOTTOM) / 2.0,
            PLOT_RIGHT,
            PLOT_TOP
        );
        assert!(svg.contains(&expected), "{svg}");
        assert_eq!(svg, svg_document(&curves, Series::Top1Error).unwrap());
        assert!(svg_document(&[("x".into(), vec![])], Series::Top1Error).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let m = RunManifest {
            argv: vec!["sweep".into(), "--seed".into(), "4".into()],
            seed: 4,
            dataset_fingerprint: Some("ab".into()),
            config: BTreeMap::from([("epsilons".to_string(), serde_json::json!([0.01, 0.02]))]),
            tool_version: "0.1.0".into(),
        };
        assert_eq!(RunManifest::from_json(&m.to_json()).unwrap(), m);
        assert_eq!(manifest_path(Path::new("/tmp/x.csv")), Path::new("/tmp/x.csv.manifest.json"));
    }
}
