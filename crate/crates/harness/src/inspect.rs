//! The `cluster` debugging subcommand.

use std::path::Path;

use clustr_core::clustering::{cluster, clusters_for_ratio, default_k, ClusterParams, ClusterResult};
use clustr_core::numerics::{io, Tensor};

use crate::config::{ClusterOptions, RunConfig};
use crate::error::{HarnessError, Result};
use crate::report::to_json;

/// Reads an `N×C` token set from a CTR1 file or a CSV file of numbers.
/// A first CSV row that does not parse is taken as a header.
pub fn read_tokens(path: &Path) -> Result<Tensor<f64>> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let t = match ext.as_str() {
        "ctr1" => io::load_tensor::<f64>(path)?,
        "csv" => {
            let mut rd = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path)?;
            let mut rows: Vec<Vec<f64>> = Vec::new();
            for (i, rec) in rd.records().enumerate() {
                let rec = rec?;
                let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse).collect();
                match parsed {
                    Ok(r) => rows.push(r),
                    Err(_) if i == 0 => continue,
                    Err(e) => return Err(HarnessError::Config(format!("{} row {}: {e}", path.display(), i + 1))),
                }
            }
            Tensor::from_rows(&rows)?
        }
        _ => return Err(HarnessError::Config(format!("{}: expected a .ctr1 or .csv file", path.display()))),
    };
    match t.rank() {
        2 => Ok(t),
        1 => {
            let n = t.len();
            Ok(t.reshape(vec![n, 1])?)
        }
        r => Err(HarnessError::Config(format!("token sets are rank 2, got rank {r}"))),
    }
}

pub fn cluster_tokens_file(opts: &ClusterOptions, path: &Path) -> Result<ClusterResult<f64>> {
    let x = read_tokens(path)?;
    let n = x.rows();
    if n == 0 {
        return Err(HarnessError::Config("empty token set".into()));
    }
    let m = match (opts.m, opts.lambda) {
        (Some(m), None) => m,
        (None, Some(l)) if l >= 1.0 => clusters_for_ratio(n, l),
        (None, None) => return Err(HarnessError::Config("set either m or lambda".into())),
        (Some(_), Some(_)) => return Err(HarnessError::Config("set only one of m and lambda".into())),
        (None, Some(l)) => return Err(HarnessError::Config(format!("λ = {l} must be ≥ 1"))),
    };
    if n == 1 {
        return Ok(ClusterResult::identity(1));
    }
    let k = opts.k.unwrap_or_else(|| default_k(n));
    Ok(cluster(&x, ClusterParams::new(n, k, m)?)?)
}

/// Clusters the configured token file and writes `cluster.json`.
pub fn cluster_run(run: &RunConfig, out: &Path) -> Result<ClusterResult<f64>> {
    let opts = run.cluster.as_ref().ok_or_else(|| HarnessError::Config("the cluster task needs a `cluster` section".into()))?;
    let res = cluster_tokens_file(opts, &run.resolve_path(&opts.input))?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("cluster.json"), to_json(&res)?)?;
    Ok(res)
}
