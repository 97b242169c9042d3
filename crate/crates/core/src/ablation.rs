//! Ablation grids: expand overrides into runs, train each and tabulate.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::config::{Precision, TrainConfig};
use crate::data::{load_dataset, Dataset};
use crate::error::{Error, Result};
use crate::trainer::train_with;

/// One swept key and the values it takes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub key: String,
    pub values: Vec<Value>,
}

/// A named set of dotted-key overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridRow {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub set: Map<String, Value>,
}

/// Explicit rows crossed with the cartesian product of the axes. With no
/// rows the product alone is used; with no axes the rows alone.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub rows: Vec<GridRow>,
    pub axes: Vec<Axis>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlannedRun {
    pub name: String,
    pub overrides: Vec<(String, Value)>,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub run: usize,
    pub name: String,
    pub overrides: Vec<(String, Value)>,
    pub mean_dsc: f64,
    pub mean_asd: Option<f64>,
    pub class_dsc: Vec<f64>,
}

fn row(name: &str, set: Value) -> GridRow {
    GridRow {
        name: Some(name.to_string()),
        set: set.as_object().cloned().unwrap_or_default(),
    }
}

impl Grid {
    pub fn from_json(text: &str) -> Result<Self> {
        let g: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("grid: {e}")))?;
        if g.axes.iter().any(|a| a.values.is_empty()) {
            return Err(Error::Config("grid axes need at least one value".into()));
        }
        Ok(g)
    }

    /// {sdb_on} x {ctr_on}.
    pub fn components() -> Self {
        Self {
            rows: Vec::new(),
            axes: vec![
                Axis {
                    key: "sdb_on".into(),
                    values: vec![json!(false), json!(true)],
                },
                Axis {
                    key: "ctr_on".into(),
                    values: vec![json!(false), json!(true)],
                },
            ],
        }
    }

    /// Components with the bank as a separate step.
    pub fn components_with_bank() -> Self {
        let off = json!({"sdb_on": false, "ctr_on": false});
        Self {
            rows: vec![
                row("base", off),
                row("sdb", json!({"sdb_on": true, "ctr_on": false})),
                row("ctr", json!({"sdb_on": false, "ctr_on": true, "bank_on": false})),
                row("sdb+ctr", json!({"sdb_on": true, "ctr_on": true, "bank_on": false})),
                row("sdb+ctr+bank", json!({"sdb_on": true, "ctr_on": true, "bank_on": true})),
            ],
            axes: Vec::new(),
        }
    }

    pub fn eta() -> Self {
        Self {
            rows: vec![
                row("bernoulli", json!({"sdb.eta": {"kind": "bernoulli", "p": 0.5}})),
                row("beta", json!({"sdb.eta": {"kind": "beta", "a": 0.5, "b": 0.5}})),
                row("uniform", json!({"sdb.eta": {"kind": "uniform"}})),
            ],
            axes: Vec::new(),
        }
    }

    pub fn directions() -> Self {
        let base = |ctr: bool, w: bool, s: bool, pix: bool| {
            json!({"sdb_on": true, "ctr_on": ctr, "ctr_w_on": w, "ctr_s_on": s, "pixel_s2w_on": pix})
        };
        Self {
            rows: vec![
                row("sdb", base(false, true, true, false)),
                row("sdb+pixel_s2w", base(false, true, true, true)),
                row("sdb+ctr_w", base(true, true, false, false)),
                row("sdb+ctr_s", base(true, false, true, false)),
                row("sdb+ctr", base(true, true, true, false)),
            ],
            axes: Vec::new(),
        }
    }

    pub fn bank_sizes() -> Self {
        Self {
            rows: Vec::new(),
            axes: vec![Axis {
                key: "bank_size".into(),
                values: [1, 32, 128, 256].into_iter().map(Value::from).collect(),
            }],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "components" => Ok(Self::components()),
            "components-bank" => Ok(Self::components_with_bank()),
            "eta" => Ok(Self::eta()),
            "directions" => Ok(Self::directions()),
            "bank" => Ok(Self::bank_sizes()),
            _ => Err(Error::Config(format!("unknown grid preset `{name}`"))),
        }
    }

    pub fn with_seeds(mut self, seeds: &[u64]) -> Self {
        self.axes.push(Axis {
            key: "seed".into(),
            values: seeds.iter().map(|&s| Value::from(s)).collect(),
        });
        self
    }

    /// Expands into concrete configurations, validating every override.
    pub fn expand(&self, base: &TrainConfig) -> Result<Vec<PlannedRun>> {
        let rows = if self.rows.is_empty() {
            vec![GridRow {
                name: None,
                set: Map::new(),
            }]
        } else {
            self.rows.clone()
        };
        let mut combos: Vec<Vec<(String, Value)>> = vec![Vec::new()];
        for axis in &self.axes {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    axis.values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((axis.key.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        let mut out = Vec::new();
        for r in &rows {
            for combo in &combos {
                let mut overrides: Vec<(String, Value)> = r.set.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
                overrides.extend(combo.iter().cloned());
                let mut config = base.clone();
                for (k, v) in &overrides {
                    config = config.with_override(k, v)?;
                }
                let mut parts: Vec<String> = r.name.iter().cloned().collect();
                parts.extend(combo.iter().map(|(k, v)| format!("{k}={}", compact(v))));
                let name = if parts.is_empty() { "base".to_string() } else { parts.join(";") };
                out.push(PlannedRun { name, overrides, config });
            }
        }
        Ok(out)
    }
}

fn compact(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Trains every run of `grid` on `data`; each run writes into
/// `base.out_dir/run_NNN`.
pub fn ablate_with(base: &TrainConfig, grid: &Grid, data: &Dataset) -> Result<Vec<AblationRow>> {
    let plan = grid.expand(base)?;
    let mut rows = Vec::with_capacity(plan.len());
    for (i, run) in plan.into_iter().enumerate() {
        let mut cfg = run.config;
        cfg.out_dir = base.out_dir.join(format!("run_{i:03}"));
        log::info!("ablation run {i}: {}", run.name);
        let outcome = match cfg.precision {
            Precision::F32 => train_with::<f32>(&cfg, data.clone(), None)?,
            Precision::F64 => train_with::<f64>(&cfg, data.clone(), None)?,
        };
        rows.push(AblationRow {
            run: i,
            name: run.name,
            overrides: run.overrides,
            mean_dsc: outcome.report.mean_dsc,
            mean_asd: outcome.report.mean_asd,
            class_dsc: outcome.report.class_dsc,
        });
    }
    Ok(rows)
}

/// Loads the dataset named by `base`, runs the grid and writes
/// `ablation.csv` and `ablation.json` into `base.out_dir`.
pub fn ablate(base: &TrainConfig, grid: &Grid) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let data = load_dataset(&base.data_root, base.model.num_classes)?;
    let rows = ablate_with(base, grid, &data)?;
    let dir = &base.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("ablation.csv"), to_csv(&rows)?)?;
    write(&dir.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
    Ok(rows)
}

fn write(path: &Path, text: String) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One row per run; override columns are the union of keys in first-seen order.
pub fn to_csv(rows: &[AblationRow]) -> Result<String> {
    let mut keys: Vec<&str> = Vec::new();
    for r in rows {
        for (k, _) in &r.overrides {
            if !keys.contains(&k.as_str()) {
                keys.push(k);
            }
        }
    }
    let classes = rows.iter().map(|r| r.class_dsc.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["run".to_string(), "name".to_string()];
    header.extend(keys.iter().map(|k| k.to_string()));
    header.extend(["mean_dsc".to_string(), "mean_asd".to_string()]);
    header.extend((1..=classes).map(|c| format!("dsc_class{c}")));
    let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.run.to_string(), r.name.clone()];
        for k in &keys {
            rec.push(
                r.overrides
                    .iter()
                    .rev()
                    .find(|(rk, _)| rk == k)
                    .map(|(_, v)| compact(v))
                    .unwrap_or_default(),
            );
        }
        rec.push(r.mean_dsc.to_string());
        rec.push(r.mean_asd.map(|a| a.to_string()).unwrap_or_default());
        rec.extend((0..classes).map(|c| r.class_dsc.get(c).map(|d| d.to_string()).unwrap_or_default()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_shapes() {
        let base = TrainConfig::default();
        let n = |g: Grid| g.expand(&base).unwrap().len();
        assert_eq!(n(Grid::components()), 4);
        assert_eq!(n(Grid::components_with_bank()), 5);
        assert_eq!(n(Grid::eta()), 3);
        assert_eq!(n(Grid::directions()), 5);
        assert_eq!(n(Grid::bank_sizes()), 4);
        assert_eq!(n(Grid::components().with_seeds(&[0, 1, 2])), 12);
        assert!(Grid::preset("nope").is_err());
    }

    #[test]
    fn cartesian_order_and_overrides() {
        let runs = Grid::components().expand(&TrainConfig::default()).unwrap();
        let flags: Vec<(bool, bool)> = runs.iter().map(|r| (r.config.sdb_on, r.config.ctr_on)).collect();
        assert_eq!(flags, [(false, false), (false, true), (true, false), (true, true)]);
        assert_eq!(runs[1].name, "sdb_on=false;ctr_on=true");
        let bank = Grid::bank_sizes().expand(&TrainConfig::default()).unwrap();
        assert_eq!(bank.iter().map(|r| r.config.effective_bank_size()).collect::<Vec<_>>(), [1, 32, 128, 256]);
        let eta = Grid::eta().expand(&TrainConfig::default()).unwrap();
        assert_eq!(eta[0].config.sdb.eta, crate::sdb::EtaDistribution::bernoulli());
        assert_eq!(eta[1].config.sdb.eta, crate::sdb::EtaDistribution::beta());
    }

    #[test]
    fn grid_json_and_bad_keys() {
        let g = Grid::from_json(r#"{"rows": [{"name": "a", "set": {"contrast.tau": 0.5}}], "axes": [{"key": "seed", "values": [1, 2]}]}"#).unwrap();
        let runs = g.expand(&TrainConfig::default()).unwrap();
        assert_eq!(runs.len(), 2);
        assert_eq!((runs[1].config.contrast.tau, runs[1].config.seed), (0.5, 2));
        assert_eq!(runs[1].name, "a;seed=2");
        let bad = Grid::from_json(r#"{"axes": [{"key": "no.such", "values": [1]}]}"#).unwrap();
        assert!(bad.expand(&TrainConfig::default()).is_err());
        assert!(Grid::from_json(r#"{"axes": [{"key": "seed", "values": []}]}"#).is_err());
    }

    #[test]
    fn csv_is_rectangular_and_quotes_json() {
        let rows = vec![
            AblationRow {
                run: 0,
                name: "beta".into(),
                overrides: vec![("sdb.eta".into(), json!({"kind": "beta", "a": 0.5, "b": 0.5}))],
                mean_dsc: 0.5,
                mean_asd: Some(2.0),
                class_dsc: vec![0.4, 0.6],
            },
            AblationRow {
                run: 1,
                name: "k".into(),
                overrides: vec![("bank_size".into(), json!(32))],
                mean_dsc: 0.25,
                mean_asd: None,
                class_dsc: vec![0.2, 0.3],
            },
        ];
        let text = to_csv(&rows).unwrap();
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
        assert_eq!(header, ["run", "name", "sdb.eta", "bank_size", "mean_dsc", "mean_asd", "dsc_class1", "dsc_class2"]);
        let recs: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
        assert_eq!(recs.len(), 2);
        assert_eq!(&recs[0][2], r#"{"a":0.5,"b":0.5,"kind":"beta"}"#);
        assert_eq!(&recs[1][3], "32");
        assert_eq!(&recs[1][5], "");
    }
}
