//! Direct-estimate tables: region-aligned response estimates with known
//! sampling errors, covariates, and an observation mask that marks which
//! cells contribute to the likelihood.

use std::path::Path;

use ndarray::{Array2, Axis};

use crate::graph::RegionGraph;

use super::ModelError;

/// Survey direct estimates for N regions and K responses.
///
/// `y[[i, k]]` and `gamma[[i, k]]` are meaningful only where
/// `observed[[i, k]]` is true; masked cells carry zeros and never enter the
/// likelihood. `x` always includes an intercept column.
#[derive(Debug, Clone)]
pub struct DirectEstimateTable {
    pub region_ids: Vec<String>,
    pub response_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub y: Array2<f64>,
    pub gamma: Array2<f64>,
    pub observed: Array2<bool>,
    pub x: Array2<f64>,
}

impl DirectEstimateTable {
    /// Builds a table from parts, validating shapes, mask consistency, and
    /// positive sampling errors on observed cells. Prepends an intercept
    /// column unless one is already present (a column that is identically 1).
    pub fn from_parts(
        region_ids: Vec<String>,
        response_names: Vec<String>,
        y: Array2<f64>,
        gamma: Array2<f64>,
        observed: Array2<bool>,
        covariates: Option<(Vec<String>, Array2<f64>)>,
    ) -> Result<Self, ModelError> {
        let n = region_ids.len();
        let k = response_names.len();
        if y.dim() != (n, k) || gamma.dim() != (n, k) || observed.dim() != (n, k) {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {n} x {k} response arrays, got y {:?}, gamma {:?}, mask {:?}",
                y.dim(),
                gamma.dim(),
                observed.dim()
            )));
        }
        for i in 0..n {
            for kk in 0..k {
                if observed[[i, kk]] {
                    let g = gamma[[i, kk]];
                    if !(g > 0.0) || !g.is_finite() || !y[[i, kk]].is_finite() {
                        return Err(ModelError::BadCell {
                            region: region_ids[i].clone(),
                            response: response_names[kk].clone(),
                        });
                    }
                }
            }
        }
        let (mut covariate_names, mut x) = match covariates {
            Some((names, x)) => {
                if x.nrows() != n || x.ncols() != names.len() {
                    return Err(ModelError::ShapeMismatch(format!(
                        "covariate matrix is {:?}, expected {n} x {}",
                        x.dim(),
                        names.len()
                    )));
                }
                (names, x)
            }
            None => (Vec::new(), Array2::zeros((n, 0))),
        };
        let has_intercept = (0..x.ncols()).any(|j| x.column(j).iter().all(|&v| v == 1.0));
        if !has_intercept {
            let mut with = Array2::ones((n, x.ncols() + 1));
            if x.ncols() > 0 {
                with.slice_mut(ndarray::s![.., 1..]).assign(&x);
            }
            x = with;
            covariate_names.insert(0, "intercept".to_string());
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::ShapeMismatch(
                "covariates contain non-finite values".into(),
            ));
        }
        Ok(DirectEstimateTable {
            region_ids,
            response_names,
            covariate_names,
            y,
            gamma,
            observed,
            x,
        })
    }

    pub fn n_regions(&self) -> usize {
        self.region_ids.len()
    }

    pub fn n_responses(&self) -> usize {
        self.response_names.len()
    }

    /// Reorders rows to match the graph's region ordering. The id sets must
    /// be identical.
    pub fn aligned_to(&self, graph: &RegionGraph) -> Result<DirectEstimateTable, ModelError> {
        if self.region_ids.len() != graph.n_regions() {
            return Err(ModelError::RegionMismatch(format!(
                "table has {} regions, graph has {}",
                self.region_ids.len(),
                graph.n_regions()
            )));
        }
        let order: Vec<usize> = graph
            .region_ids()
            .iter()
            .map(|id| {
                self.region_ids
                    .iter()
                    .position(|r| r == id)
                    .ok_or_else(|| ModelError::RegionMismatch(format!("graph region {id} missing from table")))
            })
            .collect::<Result<_, _>>()?;
        let pick = |a: &Array2<f64>| a.select(Axis(0), &order);
        Ok(DirectEstimateTable {
            region_ids: graph.region_ids().to_vec(),
            response_names: self.response_names.clone(),
            covariate_names: self.covariate_names.clone(),
            y: pick(&self.y),
            gamma: pick(&self.gamma),
            observed: self.observed.select(Axis(0), &order),
            x: pick(&self.x),
        })
    }

    /// Parses the CSV schema `region_id, y_<r>, se_<r> | moe_<r>, ...,
    /// x_<c>, ...`. Empty y/se fields mark missing cells; margins of error
    /// are converted to standard errors with the given confidence level.
    pub fn from_csv(path: &Path, moe_level: f64) -> Result<Self, ModelError> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| ModelError::Csv(e.to_string()))?;
        let headers = reader
            .headers()
            .map_err(|e| ModelError::Csv(e.to_string()))?
            .clone();
        let mut region_col = None;
        let mut y_cols: Vec<(usize, String)> = Vec::new();
        let mut se_cols: Vec<(usize, String, bool)> = Vec::new(); // (col, name, is_moe)
        let mut x_cols: Vec<(usize, String)> = Vec::new();
        for (idx, h) in headers.iter().enumerate() {
            if h == "region_id" {
                region_col = Some(idx);
            } else if let Some(name) = h.strip_prefix("y_") {
                y_cols.push((idx, name.to_string()));
            } else if let Some(name) = h.strip_prefix("se_") {
                se_cols.push((idx, name.to_string(), false));
            } else if let Some(name) = h.strip_prefix("moe_") {
                se_cols.push((idx, name.to_string(), true));
            } else if let Some(name) = h.strip_prefix("x_") {
                x_cols.push((idx, name.to_string()));
            } else {
                return Err(ModelError::Csv(format!("unrecognized column {h:?}")));
            }
        }
        let region_col =
            region_col.ok_or_else(|| ModelError::Csv("missing region_id column".into()))?;
        if y_cols.is_empty() {
            return Err(ModelError::Csv("no y_<response> columns".into()));
        }
        // pair each response with its error column
        let mut pairs = Vec::new();
        for (ycol, name) in &y_cols {
            let err = se_cols
                .iter()
                .find(|(_, n, _)| n == name)
                .ok_or_else(|| ModelError::Csv(format!("response {name} has no se_/moe_ column")))?;
            pairs.push((*ycol, err.0, err.2, name.clone()));
        }
        let z = crate::metrics::moe_divisor(moe_level)
            .map_err(|e| ModelError::Csv(e.to_string()))?;

        let mut region_ids = Vec::new();
        let mut rows_y: Vec<Vec<f64>> = Vec::new();
        let mut rows_g: Vec<Vec<f64>> = Vec::new();
        let mut rows_obs: Vec<Vec<bool>> = Vec::new();
        let mut rows_x: Vec<Vec<f64>> = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| ModelError::Csv(e.to_string()))?;
            let field = |idx: usize| -> &str { record.get(idx).unwrap_or("") };
            region_ids.push(field(region_col).to_string());
            let mut yr = Vec::with_capacity(pairs.len());
            let mut gr = Vec::with_capacity(pairs.len());
            let mut or = Vec::with_capacity(pairs.len());
            for (ycol, ecol, is_moe, name) in &pairs {
                let ys = field(*ycol);
                let es = field(*ecol);
                if ys.is_empty() && es.is_empty() {
                    yr.push(0.0);
                    gr.push(0.0);
                    or.push(false);
                    continue;
                }
                if ys.is_empty() != es.is_empty() {
                    return Err(ModelError::Csv(format!(
                        "row {}: response {name} has a value/error half missing",
                        line + 2
                    )));
                }
                let yv: f64 = ys
                    .parse()
                    .map_err(|_| ModelError::Csv(format!("row {}: bad y value {ys:?}", line + 2)))?;
                let ev: f64 = es
                    .parse()
                    .map_err(|_| ModelError::Csv(format!("row {}: bad error value {es:?}", line + 2)))?;
                let se = if *is_moe { ev / z } else { ev };
                yr.push(yv);
                gr.push(se);
                or.push(true);
            }
            rows_y.push(yr);
            rows_g.push(gr);
            rows_obs.push(or);
            let mut xr = Vec::with_capacity(x_cols.len());
            for (xcol, name) in &x_cols {
                let xs = field(*xcol);
                let xv: f64 = xs.parse().map_err(|_| {
                    ModelError::Csv(format!("row {}: bad covariate {name} value {xs:?}", line + 2))
                })?;
                xr.push(xv);
            }
            rows_x.push(xr);
        }
        let n = region_ids.len();
        let k = pairs.len();
        let to_arr = |rows: &[Vec<f64>], cols: usize| {
            Array2::from_shape_fn((n, cols), |(i, j)| rows[i][j])
        };
        let covariates = if x_cols.is_empty() {
            None
        } else {
            Some((
                x_cols.iter().map(|(_, n)| n.clone()).collect(),
                to_arr(&rows_x, x_cols.len()),
            ))
        };
        DirectEstimateTable::from_parts(
            region_ids,
            pairs.into_iter().map(|(_, _, _, n)| n).collect(),
            to_arr(&rows_y, k),
            to_arr(&rows_g, k),
            Array2::from_shape_fn((n, k), |(i, j)| rows_obs[i][j]),
            covariates,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use std::io::Write as _;

    fn write_csv(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        (dir, path)
    }

    #[test]
    fn parses_csv_with_missing_cells_and_moe() {
        let (_dir, path) = write_csv(
            "region_id,y_pov,moe_pov,y_inc,se_inc,x_urban\n\
             a,10.0,1.645,100.0,5.0,0.3\n\
             b,,,200.0,8.0,0.7\n",
        );
        let t = DirectEstimateTable::from_csv(&path, 0.90).unwrap();
        assert_eq!(t.region_ids, vec!["a", "b"]);
        assert_eq!(t.response_names, vec!["pov", "inc"]);
        assert!(t.observed[[0, 0]] && !t.observed[[1, 0]]);
        // moe / z_{0.95}, z from standard tables
        assert_abs_diff_eq!(t.gamma[[0, 0]], 1.645 / 1.6448536269514722, epsilon = 1e-9);
        // intercept prepended before x_urban
        assert_eq!(t.covariate_names, vec!["intercept", "urban"]);
        assert_eq!(t.x.dim(), (2, 2));
        assert_eq!(t.x[[1, 0]], 1.0);
        assert_abs_diff_eq!(t.x[[1, 1]], 0.7, epsilon = 1e-15);
    }

    #[test]
    fn half_missing_cell_is_rejected() {
        let (_dir, path) = write_csv(
            "region_id,y_a,se_a\n\
             r1,5.0,\n",
        );
        assert!(DirectEstimateTable::from_csv(&path, 0.90).is_err());
    }

    #[test]
    fn nonpositive_se_is_rejected() {
        let t = DirectEstimateTable::from_parts(
            vec!["a".into()],
            vec!["r".into()],
            array![[1.0]],
            array![[0.0]],
            array![[true]],
            None,
        );
        assert!(matches!(t, Err(ModelError::BadCell { .. })));
    }

    #[test]
    fn align_reorders_rows_to_graph() {
        let graph = RegionGraph::from_parts(
            vec!["a".into(), "b".into(), "c".into()],
            vec![(0, 1), (1, 2)],
        )
        .unwrap();
        let t = DirectEstimateTable::from_parts(
            vec!["c".into(), "a".into(), "b".into()],
            vec!["r".into()],
            array![[3.0], [1.0], [2.0]],
            array![[0.3], [0.1], [0.2]],
            array![[true], [true], [true]],
            None,
        )
        .unwrap();
        let aligned = t.aligned_to(&graph).unwrap();
        assert_eq!(aligned.region_ids, vec!["a", "b", "c"]);
        assert_abs_diff_eq!(aligned.y[[0, 0]], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(aligned.y[[2, 0]], 3.0, epsilon = 1e-15);
        // unknown id errors
        let bad = RegionGraph::from_parts(vec!["a".into(), "z".into()], vec![(0, 1)]).unwrap();
        assert!(t.aligned_to(&bad).is_err());
    }

    #[test]
    fn existing_intercept_is_not_duplicated() {
        let t = DirectEstimateTable::from_parts(
            vec!["a".into(), "b".into()],
            vec!["r".into()],
            array![[1.0], [2.0]],
            array![[0.1], [0.1]],
            array![[true], [true]],
            Some((vec!["ones".into()], array![[1.0], [1.0]])),
        )
        .unwrap();
        assert_eq!(t.x.ncols(), 1);
        assert_eq!(t.covariate_names, vec!["ones"]);
    }
}
