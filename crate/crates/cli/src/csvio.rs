//! Versioned CSV files.
//!
//! Line one is `#schema <name> <major>.<minor>`, line two the header. A
//! reader accepts any minor version of its own major version, provided the
//! expected columns form a prefix of the header.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schema {
    pub name: &'static str,
    pub major: u32,
    pub minor: u32,
    pub columns: &'static [&'static str],
}

pub const TRAIN_TRACE: Schema = Schema {
    name: "train_trace",
    major: 1,
    minor: 0,
    columns: &["epoch", "mean_cost", "greedy_cost", "mean_step_entropy", "tau", "wall_ms"],
};

pub const INFERENCE_TRACE: Schema = Schema {
    name: "inference_trace",
    major: 1,
    minor: 0,
    columns: &["m", "best_cost", "mean_cost", "acceptance_rate", "theta_update_flag"],
};

pub const LATENT_DUMP: Schema = Schema {
    name: "latent_dump",
    major: 1,
    minor: 0,
    columns: &["m", "k", "z1", "z2", "cost", "accepted"],
};

pub const RESULTS: Schema = Schema {
    name: "results",
    major: 1,
    minor: 0,
    columns: &["instance", "kind", "n", "method", "seed", "best_cost", "draws", "time_ms", "visits"],
};

pub const EVAL: Schema = Schema {
    name: "eval",
    major: 1,
    minor: 0,
    columns: &["instance", "cost", "reference", "gap_pct"],
};

pub const REFERENCE: Schema = Schema {
    name: "reference",
    major: 1,
    minor: 0,
    columns: &["instance", "cost"],
};

impl Schema {
    pub fn tag(&self) -> String {
        format!("#schema {} {}.{}", self.name, self.major, self.minor)
    }
}

/// Writes `rows` under `schema` to `path`.
pub fn write(path: &Path, schema: &Schema, rows: &[Vec<String>]) -> Result<()> {
    let mut buf = Vec::new();
    writeln!(buf, "{}", schema.tag())?;
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(schema.columns)?;
        for r in rows {
            if r.len() != schema.columns.len() {
                bail!("{} row has {} fields, expected {}", schema.name, r.len(), schema.columns.len());
            }
            w.write_record(r)?;
        }
        w.flush()?;
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .with_context(|| format!("writing {}", path.display()))
}

/// Reads data rows, keeping the schema's leading columns in order.
pub fn read(path: &Path, schema: &Schema) -> Result<Vec<Vec<String>>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut reader = BufReader::new(file);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    check_tag(first.trim_end(), schema).with_context(|| format!("reading {}", path.display()))?;
    let mut rest = String::new();
    reader.read_to_string(&mut rest)?;
    let mut r = csv::Reader::from_reader(rest.as_bytes());
    let header = r.headers()?.clone();
    let n = schema.columns.len();
    if header.len() < n || header.iter().take(n).ne(schema.columns.iter().copied()) {
        bail!("{}: header {:?} does not start with {:?}", path.display(), header, schema.columns);
    }
    r.records()
        .map(|rec| Ok(rec?.iter().take(n).map(str::to_string).collect()))
        .collect()
}

fn check_tag(line: &str, schema: &Schema) -> Result<()> {
    let parts: Vec<&str> = line.split_whitespace().collect();
    let [tag, name, version] = parts[..] else {
        bail!("missing `#schema <name> <version>` line");
    };
    if tag != "#schema" {
        bail!("missing `#schema <name> <version>` line");
    }
    if name != schema.name {
        bail!("schema `{name}` where `{}` was expected", schema.name);
    }
    let major: u32 = version
        .split('.')
        .next()
        .and_then(|m| m.parse().ok())
        .with_context(|| format!("bad schema version `{version}`"))?;
    if major != schema.major {
        bail!(
            "unsupported {} major version {major} (this build reads {})",
            schema.name,
            schema.major
        );
    }
    Ok(())
}

/// Shortest round-trip decimal form.
pub fn f(x: f64) -> String {
    format!("{x}")
}

pub fn flag(b: bool) -> String {
    u8::from(b).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_version_gate() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let rows = vec![vec!["0".to_string(), f(0.1 + 0.2)]];
        write(&p, &REFERENCE, &rows).unwrap();
        assert_eq!(read(&p, &REFERENCE).unwrap(), rows);
        assert!(read(&p, &EVAL).is_err());
        let text = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, text.replace(" 1.0", " 1.7")).unwrap();
        assert_eq!(read(&p, &REFERENCE).unwrap(), rows);
        std::fs::write(&p, text.replace(" 1.0", " 2.0")).unwrap();
        let err = read(&p, &REFERENCE).unwrap_err();
        assert!(format!("{err:#}").contains("major version 2"));
        std::fs::write(&p, "instance,cost\n0,1\n").unwrap();
        assert!(read(&p, &REFERENCE).is_err());
    }
}
