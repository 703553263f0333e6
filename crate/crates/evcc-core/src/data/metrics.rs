//! Metrics records: one flat key=value line per evaluation point,
//! append-only, trivially parseable.

use std::io::Write;
use std::path::Path;

use crate::error::{EvccError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub split: String,
    pub total: f64,
    pub main: f64,
    pub aux_v: f64,
    pub aux_c: f64,
    pub aux_x: f64,
    pub acc: f64,
    pub conf: f64,
    pub pi_v: f64,
    pub pi_c: f64,
    pub pi_x: f64,
    pub gamma_v: f64,
    pub gamma_c: f64,
}

impl MetricsRecord {
    pub fn to_line(&self) -> String {
        format!(
            "step={} split={} total={} main={} aux_v={} aux_c={} aux_x={} acc={} conf={} pi_v={} pi_c={} pi_x={} gamma_v={} gamma_c={}",
            self.step,
            self.split,
            self.total,
            self.main,
            self.aux_v,
            self.aux_c,
            self.aux_x,
            self.acc,
            self.conf,
            self.pi_v,
            self.pi_c,
            self.pi_x,
            self.gamma_v,
            self.gamma_c
        )
    }

    pub fn parse_line(line: &str) -> Result<MetricsRecord> {
        let mut map = std::collections::HashMap::new();
        for field in line.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| EvccError::Format(format!("bad metrics field {field:?}")))?;
            map.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<f64> {
            map.get(k)
                .ok_or_else(|| EvccError::Format(format!("metrics line missing {k}")))?
                .parse()
                .map_err(|_| EvccError::Format(format!("bad number for {k}")))
        };
        Ok(MetricsRecord {
            step: get("step")? as u64,
            split: map
                .get("split")
                .ok_or_else(|| EvccError::Format("metrics line missing split".into()))?
                .clone(),
            total: get("total")?,
            main: get("main")?,
            aux_v: get("aux_v")?,
            aux_c: get("aux_c")?,
            aux_x: get("aux_x")?,
            acc: get("acc")?,
            conf: get("conf")?,
            pi_v: get("pi_v")?,
            pi_c: get("pi_c")?,
            pi_x: get("pi_x")?,
            gamma_v: get("gamma_v")?,
            gamma_c: get("gamma_c")?,
        })
    }
}

/// Append-only metrics log backed by a file.
pub struct MetricsLog {
    file: std::fs::File,
}

impl MetricsLog {
    pub fn create(path: &Path) -> Result<MetricsLog> {
        Ok(MetricsLog { file: std::fs::File::create(path)? })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        writeln!(self.file, "{}", record.to_line())?;
        Ok(())
    }

    pub fn append_raw(&mut self, line: &str) -> Result<()> {
        writeln!(self.file, "{line}")?;
        Ok(())
    }
}
