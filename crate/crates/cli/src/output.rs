//! Ordered, single-threaded artifact writing and the run manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use kinsphere::diagnostics::Report;
use kinsphere::grid::{fmt17, DensityGrid};
use serde::Serialize;

use crate::config::Config;

pub const GRID_LAYOUT: &str = "grid: axis,<k>,nodes... and weight,<k>,weights... rows, then v1..vD,value";

pub struct Artifacts {
    dir: PathBuf,
    pub columns: BTreeMap<String, String>,
    pub checks: Vec<Report>,
}

impl Artifacts {
    pub fn new(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Artifacts {
            dir: dir.to_path_buf(),
            columns: BTreeMap::new(),
            checks: Vec::new(),
        })
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: &[Vec<f64>]) -> std::io::Result<()> {
        let mut s = header.join(",");
        s.push('\n');
        for r in rows {
            let cells: Vec<String> = r.iter().map(|x| fmt17(*x)).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        self.columns.insert(name.to_string(), header.join(","));
        std::fs::write(self.dir.join(name), s)
    }

    pub fn csv_text(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> std::io::Result<()> {
        let mut s = header.join(",");
        s.push('\n');
        for r in rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        self.columns.insert(name.to_string(), header.join(","));
        std::fs::write(self.dir.join(name), s)
    }

    pub fn grid(&mut self, name: &str, g: &DensityGrid) -> std::io::Result<()> {
        self.columns.insert(name.to_string(), GRID_LAYOUT.to_string());
        g.save_csv(&self.dir.join(name)).map_err(std::io::Error::other)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> std::io::Result<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
        s.push('\n');
        std::fs::write(self.dir.join(name), s)
    }

    pub fn check(&mut self, r: Report) {
        self.checks.push(r);
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    artifact: &'static str,
    version: &'static str,
    subcommand: &'a str,
    seed: u64,
    wall_clock_seconds: f64,
    config: &'a Config,
    columns: &'a BTreeMap<String, String>,
    checks: &'a [Report],
}

pub fn write_manifest(a: &mut Artifacts, subcommand: &str, cfg: &Config, wall: f64) -> std::io::Result<()> {
    let columns = a.columns.clone();
    let checks = a.checks.clone();
    let m = Manifest {
        artifact: "kinsphere",
        version: env!("CARGO_PKG_VERSION"),
        subcommand,
        seed: cfg.run.seed,
        wall_clock_seconds: wall,
        config: cfg,
        columns: &columns,
        checks: &checks,
    };
    a.json("manifest.json", &m)
}
