//! CSV (`x,y,z,sem,inst` with header) and ASCII PLY point-cloud files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{PointCloud, BACKGROUND};
use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloudFormat {
    CsvPoints,
    PlyAscii,
}

impl CloudFormat {
    /// Picks the format from a `.csv` or `.ply` extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(CloudFormat::CsvPoints),
            "ply" => Some(CloudFormat::PlyAscii),
            _ => None,
        }
    }
}

pub fn save_cloud<T: Real>(cloud: &PointCloud<T>, path: &Path, format: CloudFormat) -> Result<()> {
    fs::write(path, write_cloud(cloud, format))?;
    Ok(())
}

/// Loads a labeled cloud. A file without the `sem`/`inst` columns yields
/// [`Error::LabelsAbsent`]; use [`load_cloud_lenient`] to accept it.
pub fn load_cloud<T: Real>(path: &Path, format: CloudFormat) -> Result<PointCloud<T>> {
    let text = fs::read_to_string(path)?;
    let (cloud, labeled) = read_cloud(&text, format)?;
    if !labeled {
        return Err(Error::LabelsAbsent(path.display().to_string()));
    }
    Ok(cloud)
}

/// Like [`load_cloud`], but missing label columns become semantic class 0 and
/// instance id -1. The flag reports whether labels were present.
pub fn load_cloud_lenient<T: Real>(path: &Path, format: CloudFormat) -> Result<(PointCloud<T>, bool)> {
    read_cloud(&fs::read_to_string(path)?, format)
}

pub fn write_cloud<T: Real>(cloud: &PointCloud<T>, format: CloudFormat) -> String {
    let mut out = String::new();
    match format {
        CloudFormat::CsvPoints => out.push_str("x,y,z,sem,inst\n"),
        CloudFormat::PlyAscii => {
            let ty = if T::NAME == "f32" { "float" } else { "double" };
            out.push_str("ply\nformat ascii 1.0\n");
            let _ = writeln!(out, "element vertex {}", cloud.len());
            for axis in ["x", "y", "z"] {
                let _ = writeln!(out, "property {ty} {axis}");
            }
            out.push_str("property int sem\nproperty int inst\nend_header\n");
        }
    }
    let sep = if format == CloudFormat::CsvPoints { ',' } else { ' ' };
    for ((p, sem), inst) in cloud.positions().iter().zip(cloud.semantic_labels()).zip(cloud.instance_ids()) {
        let _ = writeln!(out, "{}{sep}{}{sep}{}{sep}{sem}{sep}{inst}", p[0], p[1], p[2]);
    }
    out
}

/// Parses cloud text; the flag reports whether label columns were present.
pub fn read_cloud<T: Real>(text: &str, format: CloudFormat) -> Result<(PointCloud<T>, bool)> {
    match format {
        CloudFormat::CsvPoints => read_csv(text),
        CloudFormat::PlyAscii => read_ply(text),
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn field<V: FromStr>(token: &str, line: usize, name: &str) -> Result<V> {
    token
        .trim()
        .parse()
        .map_err(|_| parse_err(line, format!("row {line}: cannot parse {name} from {token:?}")))
}

struct Columns {
    xyz: [usize; 3],
    sem: Option<usize>,
    inst: Option<usize>,
    width: usize,
}

impl Columns {
    fn from_names(names: &[&str], line: usize) -> Result<Self> {
        let find = |n: &str| names.iter().position(|&c| c == n);
        let axis = |n: &str| find(n).ok_or_else(|| parse_err(line, format!("missing column {n}")));
        Ok(Self {
            xyz: [axis("x")?, axis("y")?, axis("z")?],
            sem: find("sem"),
            inst: find("inst"),
            width: names.len(),
        })
    }

    fn labeled(&self) -> bool {
        self.sem.is_some() && self.inst.is_some()
    }
}

struct Rows<T> {
    positions: Vec<[T; 3]>,
    sem: Vec<usize>,
    inst: Vec<i32>,
}

impl<T: Real> Rows<T> {
    fn new() -> Self {
        Self { positions: Vec::new(), sem: Vec::new(), inst: Vec::new() }
    }

    fn push(&mut self, tokens: &[&str], cols: &Columns, line: usize) -> Result<()> {
        if tokens.len() != cols.width {
            return Err(parse_err(
                line,
                format!("row {line}: expected {} fields, found {}", cols.width, tokens.len()),
            ));
        }
        let mut p = [T::zero(); 3];
        for (a, name) in ["x", "y", "z"].iter().enumerate() {
            let v: f64 = field(tokens[cols.xyz[a]], line, name)?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("row {line}: non-finite {name}")));
            }
            p[a] = T::of(v);
        }
        self.positions.push(p);
        self.sem.push(match cols.sem {
            Some(c) => field(tokens[c], line, "sem")?,
            None => 0,
        });
        self.inst.push(match cols.inst {
            Some(c) => field(tokens[c], line, "inst")?,
            None => BACKGROUND,
        });
        Ok(())
    }

    fn finish(self, labeled: bool) -> Result<(PointCloud<T>, bool)> {
        Ok((PointCloud::new(self.positions, self.sem, self.inst)?, labeled))
    }
}

fn read_csv<T: Real>(text: &str) -> Result<(PointCloud<T>, bool)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (hline, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    let cols = Columns::from_names(&names, hline)?;
    let mut rows = Rows::new();
    for (line, raw) in lines {
        if raw.trim().is_empty() {
            continue;
        }
        let tokens: Vec<&str> = raw.split(',').collect();
        rows.push(&tokens, &cols, line)?;
    }
    rows.finish(cols.labeled())
}

fn read_ply<T: Real>(text: &str) -> Result<(PointCloud<T>, bool)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(parse_err(1, "missing `ply` magic")),
    }
    let mut vertex_count = None;
    let mut names: Vec<String> = Vec::new();
    let mut in_vertex = false;
    let mut header_end = None;
    for (line, raw) in lines.by_ref() {
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        match tokens.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => {
                return Err(parse_err(line, format!("unsupported PLY format {other}")))
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", "vertex", n] => {
                vertex_count = Some(field::<usize>(n, line, "vertex count")?);
                in_vertex = true;
            }
            ["element", name, _] => {
                return Err(parse_err(line, format!("unsupported element {name}")));
            }
            ["property", "list", ..] => {
                return Err(parse_err(line, "list properties are not supported"));
            }
            ["property", _ty, name] if in_vertex => names.push((*name).to_string()),
            ["end_header"] => {
                header_end = Some(line);
                break;
            }
            _ => return Err(parse_err(line, format!("unexpected header line {raw:?}"))),
        }
    }
    let end = header_end.ok_or_else(|| parse_err(text.lines().count(), "missing end_header"))?;
    let expected = vertex_count.ok_or_else(|| parse_err(end, "missing vertex element"))?;
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let cols = Columns::from_names(&name_refs, end)?;
    let mut rows = Rows::new();
    for (line, raw) in lines {
        if raw.trim().is_empty() {
            continue;
        }
        if rows.positions.len() == expected {
            return Err(parse_err(line, "more vertices than declared"));
        }
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        rows.push(&tokens, &cols, line)?;
    }
    if rows.positions.len() != expected {
        return Err(parse_err(
            text.lines().count(),
            format!("declared {expected} vertices, found {}", rows.positions.len()),
        ));
    }
    rows.finish(cols.labeled())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_scene, SceneSpec};

    fn ten_points() -> PointCloud<f64> {
        let positions = (0..10).map(|i| [i as f64 / 9.0, 0.123456789, 1.0 - i as f64 / 13.0]).collect();
        let sem = (0..10).map(|i| i % 2).collect();
        let inst = (0..10).map(|i| if i == 3 { -1 } else { (i / 4) as i32 }).collect();
        PointCloud::new(positions, sem, inst).unwrap()
    }

    #[test]
    fn round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let cloud = ten_points();
        for (name, format) in [("c.csv", CloudFormat::CsvPoints), ("c.ply", CloudFormat::PlyAscii)] {
            let path = dir.path().join(name);
            save_cloud(&cloud, &path, format).unwrap();
            let back: PointCloud<f64> = load_cloud(&path, format).unwrap();
            assert_eq!(back.semantic_labels(), cloud.semantic_labels());
            assert_eq!(back.instance_ids(), cloud.instance_ids());
            for (a, b) in back.positions().iter().zip(cloud.positions()) {
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn short_csv_row_names_the_row() {
        let text = "x,y,z,sem,inst\n0.1,0.2,0.3,0,0\n0.5,0.5\n";
        let err = read_cloud::<f64>(text, CloudFormat::CsvPoints).unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 3);
                assert!(message.contains("row 3"), "{message}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn generated_ply_keeps_point_count() {
        let spec = SceneSpec { total_points: Some(1024), ..SceneSpec::default() };
        let cloud: PointCloud<f32> = generate_scene(&spec).unwrap();
        let text = write_cloud(&cloud, CloudFormat::PlyAscii);
        let (back, labeled) = read_cloud::<f32>(&text, CloudFormat::PlyAscii).unwrap();
        assert!(labeled);
        assert_eq!(back.len(), 1024);
        assert_eq!(back, cloud);
    }

    #[test]
    fn missing_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bare.csv");
        fs::write(&path, "x,y,z\n0.1,0.2,0.3\n0.4,0.5,0.6\n").unwrap();
        let err = load_cloud::<f64>(&path, CloudFormat::CsvPoints).unwrap_err();
        assert!(matches!(err, Error::LabelsAbsent(_)));
        let (cloud, labeled) = load_cloud_lenient::<f64>(&path, CloudFormat::CsvPoints).unwrap();
        assert!(!labeled);
        assert_eq!(cloud.instance_ids(), &[-1, -1]);
    }

    #[test]
    fn ply_header_errors() {
        let binary = "ply\nformat binary_little_endian 1.0\nend_header\n";
        assert!(read_cloud::<f64>(binary, CloudFormat::PlyAscii).is_err());
        let short = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n";
        let err = read_cloud::<f64>(short, CloudFormat::PlyAscii).unwrap_err();
        assert!(err.to_string().contains("declared 2"), "{err}");
    }
}
