use std::io::Write;

use num_traits::ToPrimitive;
use serde::{Deserialize, Serialize};

use super::data::{load_data, to_batch};
use super::metrics::{evaluate_reconstruction, Db};
use super::train::{train_autoencoder, train_classifier};
use super::{Result, RunConfig};
use crate::model::{compression_ratio, table_one, ModelConfig};

/// One configuration of an experiment grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub name: String,
    pub model: ModelConfig,
}

/// One results row: γ, reconstruction NMSE and accuracy, or the error that
/// stopped the cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub name: String,
    pub patch: [usize; 2],
    pub window: [usize; 2],
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub gamma: f64,
    pub nmse_db: Option<Db>,
    pub accuracy_pct: Option<f64>,
    pub error: Option<String>,
}

/// The ten compression settings at full scale (4×256×256 input).
pub fn table_one_preset(n_classes: usize) -> Vec<GridCell> {
    table_one()
        .into_iter()
        .map(|(mut model, gamma)| {
            model.n_classes = n_classes;
            GridCell {
                name: format!(
                    "C{}-D{}-s{}-g{gamma}",
                    model.embed_dim,
                    model.in_channels,
                    model.n_stages()
                ),
                model,
            }
        })
        .collect()
}

/// Rectangular 8×1 patches with 1×16 windows against square 3×3 patches
/// with 4×4 windows, both C = 32 with two merges. The square layout needs
/// extents divisible by 12, so its input is 96×96 and frames are zero-padded.
pub fn ablation_preset(in_channels: usize, n_classes: usize) -> Vec<GridCell> {
    let mut rect = ModelConfig::swinfi(32, &[2, 2, 2], in_channels);
    rect.input = [64, 64];
    rect.n_classes = n_classes;
    let mut square = rect.clone();
    square.patch = [3, 3];
    square.window = [4, 4];
    square.input = [96, 96];
    vec![
        GridCell {
            name: "patch8x1-window1x16".into(),
            model: rect,
        },
        GridCell {
            name: "patch3x3-window4x4".into(),
            model: square,
        },
    ]
}

fn run_cell(base: &RunConfig, cell: &GridCell, classify: bool) -> Result<(f64, Option<f64>)> {
    let mut cfg = base.clone();
    cfg.model = cell.model.clone();
    let data = load_data(&cfg)?;
    let trained = train_autoencoder(&cfg, &data, None)?;
    let frames = if data.test.is_empty() { &data.val } else { &data.test };
    let batch = to_batch::<f32>(frames, data.mode, &data.norm_stats, cfg.model.input)?;
    let extent = [frames[0].n_subcarriers, cfg.data.frame_len];
    let (nmse, _) = evaluate_reconstruction(&trained.model, &batch, extent)?;
    let acc = if classify {
        Some(train_classifier(&cfg, &data, trained.model)?.test_accuracy_pct)
    } else {
        None
    };
    Ok((nmse, acc))
}

/// Train and evaluate every cell with the data and training settings of
/// `base`. A failing cell is recorded in its row and the grid continues.
/// `on_row` sees each row as soon as it is finished.
pub fn run_experiment_grid(
    base: &RunConfig,
    cells: &[GridCell],
    classify: bool,
    mut on_row: impl FnMut(&GridRow),
) -> Vec<GridRow> {
    let mut io = base.io.clone();
    io.checkpoint = None;
    io.classifier_checkpoint = None;
    io.metrics = None;
    let base = RunConfig { io, ..base.clone() };
    cells
        .iter()
        .map(|cell| {
            let outcome = run_cell(&base, cell, classify);
            let (nmse_db, accuracy_pct, error) = match outcome {
                Ok((n, a)) => (Some(Db(n)), a, None),
                Err(e) => (None, None, Some(e.to_string())),
            };
            let row = GridRow {
                name: cell.name.clone(),
                patch: cell.model.patch,
                window: cell.model.window,
                embed_dim: cell.model.embed_dim,
                depths: cell.model.depths.clone(),
                gamma: compression_ratio(&cell.model).to_f64().unwrap_or(f64::NAN),
                nmse_db,
                accuracy_pct,
                error,
            };
            on_row(&row);
            row
        })
        .collect()
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Header `name,patch,window,embed_dim,depths,gamma,nmse_db,accuracy_pct,error`.
pub fn write_grid_csv<W: Write>(rows: &[GridRow], mut out: W) -> std::io::Result<()> {
    writeln!(
        out,
        "name,patch,window,embed_dim,depths,gamma,nmse_db,accuracy_pct,error"
    )?;
    for r in rows {
        let depths = r.depths.iter().map(usize::to_string).collect::<Vec<_>>().join("-");
        let error = r.error.as_deref().unwrap_or("").replace('"', "'");
        writeln!(
            out,
            "{},{}x{},{}x{},{},{},{},{},{},\"{}\"",
            r.name,
            r.patch[0],
            r.patch[1],
            r.window[0],
            r.window[1],
            r.embed_dim,
            depths,
            r.gamma,
            opt(r.nmse_db.map(|d| d.0)),
            opt(r.accuracy_pct),
            error
        )?;
    }
    Ok(())
}
