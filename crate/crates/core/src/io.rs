//! Dataset directories, CSV ingestion and embedding dumps.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingTable;
use crate::error::{shape_err, Error, Result};
use crate::gpvar::GpvarParams;
use crate::graph::{Edge, Graph};
use crate::nn::Real;
use crate::series::SeriesDataset;

pub const VALUES_FILE: &str = "values.f32";
pub const EXOGENOUS_FILE: &str = "exogenous.f32";
pub const META_FILE: &str = "meta.json";
pub const EDGES_FILE: &str = "edges.csv";
pub const VALUES_CSV: &str = "values.csv";

/// Sidecar of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub n_steps: usize,
    pub n_nodes: usize,
    pub n_channels: usize,
    #[serde(default)]
    pub n_exogenous: usize,
    #[serde(default)]
    pub directed: bool,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Generating process, when the data is synthetic.
    #[serde(default)]
    pub process: Option<GpvarParams>,
}

impl DatasetMeta {
    pub fn describe(data: &SeriesDataset, graph: &Graph) -> Self {
        Self {
            n_steps: data.n_steps(),
            n_nodes: data.n_nodes(),
            n_channels: data.n_channels(),
            n_exogenous: data.n_exogenous(),
            directed: graph.is_directed(),
            seed: None,
            process: None,
        }
    }
}

/// Writes `values` as little-endian f32 in row-major order.
pub fn write_f32_file(path: &Path, values: &Array3<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in values.iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_f32_file(path: &Path, shape: (usize, usize, usize)) -> Result<Array3<f64>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let expected = shape.0 * shape.1 * shape.2 * 4;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "{} holds {} bytes, expected {expected} for shape {shape:?}",
            path.display(),
            bytes.len()
        )));
    }
    let flat: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    Array3::from_shape_vec(shape, flat).map_err(|e| Error::Format(e.to_string()))
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeRow {
    src: usize,
    dst: usize,
    weight: f64,
}

/// Every stored edge, one row each (undirected graphs list both directions).
pub fn write_edges_csv(path: &Path, graph: &Graph) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for e in graph.edges() {
        w.serialize(EdgeRow { src: e.src, dst: e.dst, weight: e.weight })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `src,dst,weight` edge list. For undirected graphs a pair may be
/// listed once or in both directions.
pub fn read_edges_csv(path: &Path, n_nodes: usize, directed: bool) -> Result<Graph> {
    let mut rows = Vec::new();
    for row in csv::Reader::from_path(path)?.deserialize::<EdgeRow>() {
        rows.push(row?);
    }
    if directed {
        let edges = rows.into_iter().map(|r| Edge { src: r.src, dst: r.dst, weight: r.weight }).collect();
        return Graph::new(n_nodes, edges, true);
    }
    let mut pairs: HashMap<(usize, usize), f64> = HashMap::new();
    let mut listed = HashSet::new();
    for r in rows {
        if !listed.insert((r.src, r.dst)) {
            return Err(Error::Format(format!("duplicate edge ({}, {})", r.src, r.dst)));
        }
        let key = (r.src.min(r.dst), r.src.max(r.dst));
        if *pairs.entry(key).or_insert(r.weight) != r.weight {
            return Err(Error::Format(format!("edge ({}, {}) disagrees with its mirror", r.src, r.dst)));
        }
    }
    let mut list: Vec<(usize, usize, f64)> = pairs.into_iter().map(|((i, j), w)| (i, j, w)).collect();
    list.sort_by_key(|&(i, j, _)| (i, j));
    Graph::undirected(n_nodes, &list)
}

/// Writes `values.f32`, optional `exogenous.f32`, `edges.csv` and
/// `meta.json` into `dir`, which must exist.
pub fn write_dataset_dir(dir: &Path, data: &SeriesDataset, graph: &Graph, meta: &DatasetMeta) -> Result<()> {
    if graph.n_nodes() != data.n_nodes() {
        return Err(shape_err("graph nodes", &[data.n_nodes()], &[graph.n_nodes()]));
    }
    write_f32_file(&dir.join(VALUES_FILE), data.values())?;
    if let Some(u) = data.exogenous() {
        write_f32_file(&dir.join(EXOGENOUS_FILE), u)?;
    }
    write_edges_csv(&dir.join(EDGES_FILE), graph)?;
    std::fs::write(dir.join(META_FILE), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn read_dataset_dir(dir: &Path) -> Result<(SeriesDataset, Graph, DatasetMeta)> {
    let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(dir.join(META_FILE))?)?;
    let values = read_f32_file(&dir.join(VALUES_FILE), (meta.n_steps, meta.n_nodes, meta.n_channels))?;
    let exogenous = (meta.n_exogenous > 0)
        .then(|| read_f32_file(&dir.join(EXOGENOUS_FILE), (meta.n_steps, meta.n_nodes, meta.n_exogenous)))
        .transpose()?;
    let data = SeriesDataset::new(values, exogenous)?;
    let graph = read_edges_csv(&dir.join(EDGES_FILE), meta.n_nodes, meta.directed)?;
    Ok((data, graph, meta))
}

/// One row per time step with columns `node_0..node_{N-1}` (single-channel
/// data) or `node_{i}_{c}`.
pub fn write_values_csv(path: &Path, data: &SeriesDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let (n, d) = (data.n_nodes(), data.n_channels());
    let header: Vec<String> = (0..n)
        .flat_map(|i| (0..d).map(move |c| if d == 1 { format!("node_{i}") } else { format!("node_{i}_{c}") }))
        .collect();
    w.write_record(&header)?;
    for t in 0..data.n_steps() {
        w.write_record(data.frame(t).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Sidecar for user-supplied CSV data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvMeta {
    pub n_nodes: usize,
    #[serde(default)]
    pub directed: bool,
    /// Adds sine/cosine time-of-day channels with this period.
    #[serde(default)]
    pub steps_per_day: Option<usize>,
}

enum Column {
    Node(usize),
    Mask(usize),
    Ignored,
}

fn parse_column(name: &str) -> Result<Column> {
    let name = name.trim();
    if let Some(i) = name.strip_prefix("node_") {
        return i.parse().map(Column::Node).map_err(|_| Error::Format(format!("bad column name {name:?}")));
    }
    if let Some(i) = name.strip_prefix("mask_") {
        return i.parse().map(Column::Mask).map_err(|_| Error::Format(format!("bad column name {name:?}")));
    }
    match name {
        "time" | "timestamp" | "t" => Ok(Column::Ignored),
        _ => Err(Error::Format(format!("unexpected column {name:?}"))),
    }
}

fn parse_cell(cell: &str) -> Result<f64> {
    let cell = cell.trim();
    if cell.is_empty() || cell.eq_ignore_ascii_case("nan") {
        return Ok(f64::NAN);
    }
    cell.parse().map_err(|_| Error::Format(format!("cannot parse {cell:?} as a number")))
}

/// Loads a single-channel CSV (`node_i` columns, optional `mask_i` columns
/// flagging imputed values) plus an edge list.
///
/// A missing cell is allowed only for nodes with a mask column: it is
/// zero-filled and flagged. When any mask column exists, the flags of every
/// node become an exogenous channel; `steps_per_day` appends sine and cosine
/// time-of-day channels.
pub fn load_csv_dataset(values_csv: &Path, edges_csv: &Path, meta: &CsvMeta) -> Result<(SeriesDataset, Graph)> {
    let mut reader = csv::Reader::from_path(values_csv)?;
    let columns = reader.headers()?.iter().map(parse_column).collect::<Result<Vec<_>>>()?;
    let n_value_cols = columns.iter().filter(|c| matches!(c, Column::Node(_))).count();
    if n_value_cols != meta.n_nodes {
        return Err(shape_err("node columns vs metadata", &[meta.n_nodes], &[n_value_cols]));
    }
    let mut has_mask = vec![false; meta.n_nodes];
    let mut seen = vec![false; meta.n_nodes];
    for c in &columns {
        match *c {
            Column::Node(i) | Column::Mask(i) if i >= meta.n_nodes => {
                return Err(Error::NodeOutOfRange { index: i, n_nodes: meta.n_nodes })
            }
            Column::Node(i) if seen[i] => return Err(Error::Format(format!("duplicate column node_{i}"))),
            Column::Node(i) => seen[i] = true,
            Column::Mask(i) => has_mask[i] = true,
            Column::Ignored => {}
        }
    }

    let n = meta.n_nodes;
    let mut values = Vec::new();
    let mut masks = Vec::new();
    for (t, record) in reader.records().enumerate() {
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
                Error::Format(format!("ragged row {t}: {len} cells, header has {expected_len}"))
            }
            _ => Error::Csv(e),
        })?;
        let mut row = vec![0.0; n];
        let mut flag = vec![0.0; n];
        for (cell, col) in record.iter().zip(&columns) {
            match *col {
                Column::Node(i) => row[i] = parse_cell(cell)?,
                Column::Mask(i) => {
                    let m = parse_cell(cell)?;
                    flag[i] = if m.is_nan() || m == 0.0 { 0.0 } else { 1.0 };
                }
                Column::Ignored => {}
            }
        }
        for i in 0..n {
            if row[i].is_nan() {
                if !has_mask[i] {
                    return Err(Error::Format(format!(
                        "missing value at row {t}, node {i} without a mask_{i} column"
                    )));
                }
                row[i] = 0.0;
                flag[i] = 1.0;
            }
        }
        values.extend(row);
        masks.extend(flag);
    }
    let steps = values.len() / n.max(1);
    if steps == 0 {
        return Err(Error::Format("values CSV has no rows".into()));
    }
    let values = Array3::from_shape_vec((steps, n, 1), values).map_err(|e| Error::Format(e.to_string()))?;

    let mut channels: Vec<Array2<f64>> = Vec::new();
    if has_mask.iter().any(|&m| m) {
        channels.push(Array2::from_shape_vec((steps, n), masks).map_err(|e| Error::Format(e.to_string()))?);
    }
    if let Some(period) = meta.steps_per_day {
        if period == 0 {
            return Err(Error::Config("steps_per_day must be positive".into()));
        }
        let phase = |t: usize| std::f64::consts::TAU * (t % period) as f64 / period as f64;
        channels.push(Array2::from_shape_fn((steps, n), |(t, _)| phase(t).sin()));
        channels.push(Array2::from_shape_fn((steps, n), |(t, _)| phase(t).cos()));
    }
    let exogenous = (!channels.is_empty()).then(|| {
        Array3::from_shape_fn((steps, n, channels.len()), |(t, i, c)| channels[c][[t, i]])
    });
    let data = SeriesDataset::new(values, exogenous)?;
    let graph = read_edges_csv(edges_csv, n, meta.directed)?;
    Ok((data, graph))
}

/// Dumps `node_id, v_0..v_{d-1}` (posterior means for variational tables),
/// plus `cluster_argmax` for clustered tables.
pub fn write_embeddings_csv<F: Real>(path: &Path, table: &EmbeddingTable<F>) -> Result<()> {
    write_embeddings(File::create(path)?, table)
}

pub fn write_embeddings<F: Real, W: Write>(sink: W, table: &EmbeddingTable<F>) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    let clusters = table.cluster_argmax();
    let mut header = vec!["node_id".to_string()];
    header.extend((0..table.dim()).map(|k| format!("v_{k}")));
    if clusters.is_some() {
        header.push("cluster_argmax".into());
    }
    w.write_record(&header)?;
    for (i, row) in table.mean_table().rows().into_iter().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|v| v.to_f64().unwrap().to_string()));
        if let Some(c) = &clusters {
            rec.push(c[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Embedding dump as written by [`write_embeddings_csv`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDump {
    pub values: Array2<f64>,
    pub clusters: Option<Vec<usize>>,
}

pub fn read_embeddings_csv(path: &Path) -> Result<EmbeddingDump> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    if header.get(0) != Some("node_id") {
        return Err(Error::Format("embedding dump must start with node_id".into()));
    }
    let clustered = header.iter().next_back() == Some("cluster_argmax");
    let dim = header.len() - 1 - usize::from(clustered);
    let mut values = Vec::new();
    let mut clusters = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let id: usize = rec[0].parse().map_err(|_| Error::Format(format!("bad node id {:?}", &rec[0])))?;
        if id != i {
            return Err(Error::Format(format!("row {i} holds node {id}")));
        }
        for k in 0..dim {
            values.push(parse_cell(&rec[1 + k])?);
        }
        if clustered {
            clusters.push(rec[dim + 1].parse().map_err(|_| Error::Format("bad cluster id".into()))?);
        }
    }
    let rows = values.len() / dim.max(1);
    let values = Array2::from_shape_vec((rows, dim), values).map_err(|e| Error::Format(e.to_string()))?;
    Ok(EmbeddingDump { values, clusters: clustered.then_some(clusters) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::EmbeddingMode;
    use tempfile::tempdir;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn toy_csv_loads() {
        let d = tempdir().unwrap();
        let v = write(d.path(), "v.csv", "node_0,node_1,node_2\n1,2,3\n4,5,6\n");
        let e = write(d.path(), "e.csv", "src,dst,weight\n0,1,1.0\n1,2,0.5\n");
        let (data, g) = load_csv_dataset(&v, &e, &CsvMeta { n_nodes: 3, directed: false, steps_per_day: None }).unwrap();
        assert_eq!((data.n_steps(), data.n_nodes(), data.n_exogenous()), (2, 3, 0));
        assert_eq!(data.values()[[1, 2, 0]], 6.0);
        assert_eq!(g.n_undirected_edges(), 2);
    }

    #[test]
    fn nan_with_mask_is_imputed() {
        let d = tempdir().unwrap();
        let v = write(d.path(), "v.csv", "node_0,node_1,mask_1\n1,NaN,0\n2,3,0\n");
        let e = write(d.path(), "e.csv", "src,dst,weight\n");
        let meta = CsvMeta { n_nodes: 2, directed: false, steps_per_day: Some(4) };
        let (data, _) = load_csv_dataset(&v, &e, &meta).unwrap();
        assert_eq!(data.values()[[0, 1, 0]], 0.0);
        let u = data.exogenous().unwrap();
        assert_eq!(u.shape(), &[2, 2, 3]);
        assert_eq!(u[[0, 1, 0]], 1.0);
        assert_eq!(u[[1, 1, 0]], 0.0);
        assert!((u[[1, 0, 1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loader_errors() {
        let d = tempdir().unwrap();
        let meta = CsvMeta { n_nodes: 2, directed: false, steps_per_day: None };
        let e = write(d.path(), "e.csv", "src,dst,weight\n0,1,1\n");
        let ragged = write(d.path(), "r.csv", "node_0,node_1\n1,2\n3\n");
        assert!(matches!(load_csv_dataset(&ragged, &e, &meta), Err(Error::Format(m)) if m.contains("ragged")));
        let nan = write(d.path(), "n.csv", "node_0,node_1\n1,\n");
        assert!(load_csv_dataset(&nan, &e, &meta).is_err());
        let three = write(d.path(), "t.csv", "node_0,node_1,node_2\n1,2,3\n");
        assert!(load_csv_dataset(&three, &e, &meta).is_err());
        let ok = write(d.path(), "ok.csv", "node_0,node_1\n1,2\n");
        let bad_edge = write(d.path(), "be.csv", "src,dst,weight\n0,5,1\n");
        assert!(matches!(load_csv_dataset(&ok, &bad_edge, &meta), Err(Error::NodeOutOfRange { .. })));
    }

    #[test]
    fn dataset_dir_roundtrip() {
        let d = tempdir().unwrap();
        let values = Array3::from_shape_fn((5, 3, 1), |(t, i, _)| t as f64 * 0.5 - i as f64);
        let data = SeriesDataset::new(values, None).unwrap();
        let g = Graph::undirected(3, &[(0, 1, 0.5), (1, 1, 1.0), (1, 2, 0.25)]).unwrap();
        write_dataset_dir(d.path(), &data, &g, &DatasetMeta::describe(&data, &g)).unwrap();
        let (back, g2, meta) = read_dataset_dir(d.path()).unwrap();
        assert_eq!(back, data);
        assert_eq!(g2.dense_adjacency(), g.dense_adjacency());
        assert_eq!(meta.n_steps, 5);
        assert_eq!(std::fs::metadata(d.path().join(VALUES_FILE)).unwrap().len(), 5 * 3 * 4);
    }

    #[test]
    fn embedding_dump_roundtrip() {
        let d = tempdir().unwrap();
        for mode in [EmbeddingMode::Plain, EmbeddingMode::Clustered] {
            let t = EmbeddingTable::<f32>::new(mode, 120, 8, 5, 1.0, 3).unwrap();
            let p = d.path().join("emb.csv");
            write_embeddings_csv(&p, &t).unwrap();
            let dump = read_embeddings_csv(&p).unwrap();
            assert_eq!(dump.values.dim(), (120, 8));
            let max_err = dump
                .values
                .iter()
                .zip(t.mean_table().iter())
                .map(|(a, b)| (a - f64::from(*b)).abs())
                .fold(0.0, f64::max);
            assert!(max_err <= 1e-6);
            assert_eq!(dump.clusters.is_some(), mode == EmbeddingMode::Clustered);
            if let Some(c) = dump.clusters {
                assert!(c.iter().all(|&k| k < 5));
                assert_eq!(Some(c), t.cluster_argmax());
            }
        }
    }
}
