//! Dataset CSV layout.
//!
//! One header row; feature columns carry free names, grouping features use
//! the reserved names `__id_k` (categorical level of feature `k`), `__t`
//! (measurement time), and `__loc_x` / `__loc_y` (2-D location). Values
//! round-trip through the shortest-representation float formatting, so a
//! saved dataset reloads bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use lmmvae_core::design::REScenario;
use lmmvae_core::nn::Matrix;

/// A dense observation matrix with its feature names.
#[derive(Debug, Clone)]
pub struct DataMatrix {
    pub x: Matrix,
    pub feature_names: Vec<String>,
}

impl DataMatrix {
    pub fn new(x: Matrix, feature_names: Vec<String>) -> Self {
        assert_eq!(x.cols(), feature_names.len(), "one name per feature column");
        DataMatrix { x, feature_names }
    }

    pub fn with_default_names(x: Matrix) -> Self {
        let names = (0..x.cols()).map(|j| format!("x{j}")).collect();
        DataMatrix::new(x, names)
    }
}

/// What kind of grouping structure a CSV carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioDecl {
    Categorical,
    Longitudinal { poly_terms: usize },
    Spatial,
    SpatialCategorical,
}

impl ScenarioDecl {
    pub fn parse(name: &str, poly_terms: usize) -> Result<Self> {
        Ok(match name {
            "categorical" => ScenarioDecl::Categorical,
            "longitudinal" => ScenarioDecl::Longitudinal { poly_terms },
            "spatial" => ScenarioDecl::Spatial,
            "spatial-categorical" => ScenarioDecl::SpatialCategorical,
            other => bail!("unknown scenario '{other}'"),
        })
    }
}

fn fmt_float(v: f64) -> String {
    // `{}` prints the shortest string that parses back to the same f64
    format!("{v}")
}

/// Writes `x` plus the scenario's grouping columns.
pub fn save_dataset(path: &Path, data: &DataMatrix, scenario: &REScenario) -> Result<()> {
    if scenario.n_rows() != data.x.rows() {
        bail!(
            "scenario describes {} rows, data has {}",
            scenario.n_rows(),
            data.x.rows()
        );
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);

    let mut header: Vec<String> = data.feature_names.clone();
    match scenario {
        REScenario::Categorical { level_ids, .. } => {
            for k in 0..level_ids.len() {
                header.push(format!("__id_{k}"));
            }
        }
        REScenario::Longitudinal { .. } => {
            header.push("__id_0".into());
            header.push("__t".into());
        }
        REScenario::Spatial { .. } => {
            header.push("__loc_x".into());
            header.push("__loc_y".into());
        }
        REScenario::SpatialCategorical { level_ids, .. } => {
            header.push("__loc_x".into());
            header.push("__loc_y".into());
            for k in 0..level_ids.len() {
                header.push(format!("__id_{k}"));
            }
        }
    }
    writeln!(out, "{}", header.join(","))?;

    let fmt_id = |id: Option<usize>| match id {
        Some(j) => format!("{j}"),
        None => String::new(),
    };
    for i in 0..data.x.rows() {
        let mut fields: Vec<String> = data.x.row(i).iter().map(|&v| fmt_float(v)).collect();
        match scenario {
            REScenario::Categorical { level_ids, .. } => {
                for ids in level_ids {
                    fields.push(fmt_id(ids[i]));
                }
            }
            REScenario::Longitudinal {
                subject_ids, times, ..
            } => {
                fields.push(fmt_id(subject_ids[i]));
                fields.push(fmt_float(times[i]));
            }
            REScenario::Spatial {
                locations,
                location_ids,
            } => {
                push_location(&mut fields, locations, location_ids[i]);
            }
            REScenario::SpatialCategorical {
                locations,
                location_ids,
                level_ids,
                ..
            } => {
                push_location(&mut fields, locations, location_ids[i]);
                for ids in level_ids {
                    fields.push(fmt_id(ids[i]));
                }
            }
        }
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

fn push_location(fields: &mut Vec<String>, locations: &Matrix, id: Option<usize>) {
    match id {
        Some(j) => {
            fields.push(fmt_float(locations[(j, 0)]));
            fields.push(fmt_float(locations[(j, 1)]));
        }
        None => {
            fields.push(String::new());
            fields.push(String::new());
        }
    }
}

/// Raw parsed CSV: features plus the reserved columns, still unmapped.
struct RawDataset {
    features: DataMatrix,
    id_cols: Vec<Vec<Option<i64>>>,
    times: Option<Vec<f64>>,
    locs: Option<Vec<Option<(f64, f64)>>>,
}

fn parse_raw(path: &Path) -> Result<RawDataset> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(BufReader::new(file));
    let headers: Vec<String> = reader
        .headers()
        .context("reading header")?
        .iter()
        .map(str::to_owned)
        .collect();
    if headers.is_empty() {
        bail!("{}: empty file", path.display());
    }

    let mut id_positions: Vec<(usize, usize)> = Vec::new(); // (feature index k, column)
    let mut t_pos = None;
    let mut loc_x_pos = None;
    let mut loc_y_pos = None;
    let mut feature_positions = Vec::new();
    let mut feature_names = Vec::new();
    for (c, name) in headers.iter().enumerate() {
        if let Some(rest) = name.strip_prefix("__id_") {
            let k: usize = rest
                .parse()
                .map_err(|_| anyhow!("bad reserved column name '{name}'"))?;
            id_positions.push((k, c));
        } else if name == "__t" {
            t_pos = Some(c);
        } else if name == "__loc_x" {
            loc_x_pos = Some(c);
        } else if name == "__loc_y" {
            loc_y_pos = Some(c);
        } else {
            feature_positions.push(c);
            feature_names.push(name.clone());
        }
    }
    id_positions.sort_unstable();
    for (expect, (k, _)) in id_positions.iter().enumerate() {
        if *k != expect {
            bail!("id columns must be numbered __id_0, __id_1, ...");
        }
    }
    if loc_x_pos.is_some() != loc_y_pos.is_some() {
        bail!("__loc_x and __loc_y must appear together");
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut id_cols: Vec<Vec<Option<i64>>> = vec![Vec::new(); id_positions.len()];
    let mut times: Vec<f64> = Vec::new();
    let mut locs: Vec<Option<(f64, f64)>> = Vec::new();

    let parse_cell = |cell: &str, row: usize, col: &str| -> Result<f64> {
        let v: f64 = cell
            .trim()
            .parse()
            .map_err(|_| anyhow!("row {row}, column '{col}': non-numeric cell '{cell}'"))?;
        if !v.is_finite() {
            bail!("row {row}, column '{col}': non-finite cell '{cell}'");
        }
        Ok(v)
    };

    for (r, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("row {}", r + 1))?;
        if record.len() != headers.len() {
            bail!(
                "row {}: expected {} fields, found {}",
                r + 1,
                headers.len(),
                record.len()
            );
        }
        let mut row = Vec::with_capacity(feature_positions.len());
        for (&c, name) in feature_positions.iter().zip(&feature_names) {
            row.push(parse_cell(&record[c], r + 1, name)?);
        }
        rows.push(row);
        for ((_, c), col) in id_positions.iter().zip(id_cols.iter_mut()) {
            let cell = record[*c].trim();
            if cell.is_empty() {
                col.push(None);
            } else {
                let v: i64 = cell.parse().map_err(|_| {
                    anyhow!("row {}, column '__id': non-integer level '{cell}'", r + 1)
                })?;
                if v < 0 {
                    bail!("row {}: negative level id {v}", r + 1);
                }
                col.push(Some(v));
            }
        }
        if let Some(c) = t_pos {
            times.push(parse_cell(&record[c], r + 1, "__t")?);
        }
        if let (Some(cx), Some(cy)) = (loc_x_pos, loc_y_pos) {
            let sx = record[cx].trim();
            let sy = record[cy].trim();
            if sx.is_empty() && sy.is_empty() {
                locs.push(None);
            } else {
                locs.push(Some((
                    parse_cell(sx, r + 1, "__loc_x")?,
                    parse_cell(sy, r + 1, "__loc_y")?,
                )));
            }
        }
    }
    if rows.is_empty() {
        bail!("{}: no data rows", path.display());
    }

    let p = feature_names.len();
    let n = rows.len();
    let mut x = Matrix::zeros(n, p);
    for (i, row) in rows.into_iter().enumerate() {
        x.row_mut(i).copy_from_slice(&row);
    }
    Ok(RawDataset {
        features: DataMatrix::new(x, feature_names),
        id_cols,
        times: t_pos.map(|_| times),
        locs: loc_x_pos.map(|_| locs),
    })
}

/// Distinct-value mapping for one grouping feature, built on training data.
#[derive(Debug, Clone)]
pub struct LevelMap {
    forward: BTreeMap<i64, usize>,
}

impl LevelMap {
    /// Distinct values in ascending order become levels 0..q-1, so files
    /// whose levels are already 0..q-1 map onto themselves.
    fn from_values(values: &[Option<i64>]) -> Self {
        let mut forward: BTreeMap<i64, usize> = values.iter().flatten().map(|&v| (v, 0)).collect();
        for (next, idx) in forward.values_mut().enumerate() {
            *idx = next;
        }
        LevelMap { forward }
    }

    pub fn q(&self) -> usize {
        self.forward.len()
    }

    fn apply(&self, values: &[Option<i64>]) -> Vec<Option<usize>> {
        values
            .iter()
            .map(|v| v.and_then(|v| self.forward.get(&v).copied()))
            .collect()
    }
}

/// Location mapping keyed on exact coordinate bits.
#[derive(Debug, Clone)]
struct LocationMap {
    forward: BTreeMap<(u64, u64), usize>,
    coords: Vec<(f64, f64)>,
}

impl LocationMap {
    /// Distinct coordinate pairs in ascending `(x, y)` order become
    /// location ids 0..q-1.
    fn from_values(values: &[Option<(f64, f64)>]) -> Self {
        let mut coords: Vec<(f64, f64)> = values.iter().flatten().copied().collect();
        coords.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        coords.dedup_by(|a, b| a.0.to_bits() == b.0.to_bits() && a.1.to_bits() == b.1.to_bits());
        let forward: BTreeMap<(u64, u64), usize> = coords
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| ((x.to_bits(), y.to_bits()), i))
            .collect();
        LocationMap { forward, coords }
    }

    fn apply(&self, values: &[Option<(f64, f64)>]) -> Vec<Option<usize>> {
        values
            .iter()
            .map(|v| v.and_then(|v| self.forward.get(&(v.0.to_bits(), v.1.to_bits())).copied()))
            .collect()
    }

    fn matrix(&self) -> Matrix {
        let mut m = Matrix::zeros(self.coords.len(), 2);
        for (i, &(x, y)) in self.coords.iter().enumerate() {
            m[(i, 0)] = x;
            m[(i, 1)] = y;
        }
        m
    }
}

/// The grouping maps learned from a training CSV; applying them to a test
/// CSV sends level values unseen in training to `None`, which the models
/// treat as zero random effect.
#[derive(Debug, Clone)]
pub struct ScenarioMaps {
    levels: Vec<LevelMap>,
    locations: Option<LocationMap>,
}

fn build_scenario(raw: &RawDataset, decl: ScenarioDecl, maps: &ScenarioMaps) -> Result<REScenario> {
    match decl {
        ScenarioDecl::Categorical => {
            if raw.id_cols.is_empty() {
                bail!("categorical scenario needs at least one __id_k column");
            }
            if maps.levels.len() != raw.id_cols.len() {
                bail!(
                    "file has {} id columns, training had {}",
                    raw.id_cols.len(),
                    maps.levels.len()
                );
            }
            Ok(REScenario::Categorical {
                cardinalities: maps.levels.iter().map(LevelMap::q).collect(),
                level_ids: maps
                    .levels
                    .iter()
                    .zip(&raw.id_cols)
                    .map(|(m, col)| m.apply(col))
                    .collect(),
            })
        }
        ScenarioDecl::Longitudinal { poly_terms } => {
            let times = raw
                .times
                .clone()
                .ok_or_else(|| anyhow!("longitudinal scenario needs a __t column"))?;
            let ids = raw
                .id_cols
                .first()
                .ok_or_else(|| anyhow!("longitudinal scenario needs an __id_0 column"))?;
            Ok(REScenario::Longitudinal {
                subjects: maps.levels[0].q(),
                poly_terms,
                subject_ids: maps.levels[0].apply(ids),
                times,
            })
        }
        ScenarioDecl::Spatial => {
            let locs = raw
                .locs
                .as_ref()
                .ok_or_else(|| anyhow!("spatial scenario needs __loc_x/__loc_y columns"))?;
            let lmap = maps
                .locations
                .as_ref()
                .expect("spatial maps carry locations");
            Ok(REScenario::Spatial {
                locations: lmap.matrix(),
                location_ids: lmap.apply(locs),
            })
        }
        ScenarioDecl::SpatialCategorical => {
            let locs = raw
                .locs
                .as_ref()
                .ok_or_else(|| anyhow!("spatial scenario needs __loc_x/__loc_y columns"))?;
            if raw.id_cols.is_empty() {
                bail!("spatial-categorical scenario needs __id_k columns");
            }
            let lmap = maps
                .locations
                .as_ref()
                .expect("spatial maps carry locations");
            Ok(REScenario::SpatialCategorical {
                locations: lmap.matrix(),
                location_ids: lmap.apply(locs),
                cardinalities: maps.levels.iter().map(LevelMap::q).collect(),
                level_ids: maps
                    .levels
                    .iter()
                    .zip(&raw.id_cols)
                    .map(|(m, col)| m.apply(col))
                    .collect(),
            })
        }
    }
}

fn maps_from_raw(raw: &RawDataset, decl: ScenarioDecl) -> ScenarioMaps {
    let levels: Vec<LevelMap> = match decl {
        ScenarioDecl::Longitudinal { .. } => raw
            .id_cols
            .first()
            .map(|c| vec![LevelMap::from_values(c)])
            .unwrap_or_default(),
        _ => raw
            .id_cols
            .iter()
            .map(|c| LevelMap::from_values(c))
            .collect(),
    };
    let locations = raw.locs.as_ref().map(|l| LocationMap::from_values(l));
    ScenarioMaps { levels, locations }
}

/// Per-feature moments used for optional z-scoring.
#[derive(Debug, Clone)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Matrix) -> Self {
        let mean = x.col_means();
        let mut sd = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for (s, (&v, &m)) in sd.iter_mut().zip(x.row(i).iter().zip(&mean)) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut sd {
            *s = (*s / x.rows() as f64).sqrt();
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        Standardizer { mean, sd }
    }

    pub fn apply(&self, x: &mut Matrix) {
        for i in 0..x.rows() {
            for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.sd[j];
            }
        }
    }
}

/// Loads a single CSV; level universes are built from this file alone.
pub fn load_dataset(
    path: &Path,
    decl: ScenarioDecl,
    standardize: bool,
) -> Result<(DataMatrix, REScenario)> {
    let mut raw = parse_raw(path)?;
    let maps = maps_from_raw(&raw, decl);
    let scenario = build_scenario(&raw, decl, &maps)?;
    if standardize {
        Standardizer::fit(&raw.features.x.clone()).apply(&mut raw.features.x);
    }
    scenario
        .validate()
        .map_err(|e| anyhow!("{}: invalid scenario: {e}", path.display()))?;
    Ok((raw.features, scenario))
}

/// Loads a train/test CSV pair. Level universes and standardization
/// moments come from the training file; test levels unseen in training map
/// to `None` (zero random effect).
pub fn load_dataset_pair(
    train_path: &Path,
    test_path: &Path,
    decl: ScenarioDecl,
    standardize: bool,
) -> Result<((DataMatrix, REScenario), (DataMatrix, REScenario))> {
    let mut train_raw = parse_raw(train_path)?;
    let mut test_raw = parse_raw(test_path)?;
    if train_raw.features.feature_names != test_raw.features.feature_names {
        bail!("train and test files have different feature columns");
    }
    let maps = maps_from_raw(&train_raw, decl);
    let train_sc = build_scenario(&train_raw, decl, &maps)?;
    let test_sc = build_scenario(&test_raw, decl, &maps)?;
    if standardize {
        let st = Standardizer::fit(&train_raw.features.x);
        st.apply(&mut train_raw.features.x);
        st.apply(&mut test_raw.features.x);
    }
    train_sc
        .validate()
        .map_err(|e| anyhow!("invalid training scenario: {e}"))?;
    test_sc
        .validate()
        .map_err(|e| anyhow!("invalid test scenario: {e}"))?;
    Ok(((train_raw.features, train_sc), (test_raw.features, test_sc)))
}
