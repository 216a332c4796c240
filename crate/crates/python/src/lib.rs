use std::collections::BTreeMap;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use pnk::blocks::{upsample, AlphaMode, UpsampleMode};
use pnk::boxes::{Annotation, Detection};
use pnk::config::ExperimentConfig;
use pnk::data::{self, DatasetSpec};
use pnk::model::Detector;
use pnk::{metrics, Error, Graph, Tensor};

/// `(x1, y1, x2, y2, score, class_id)`
type DetTuple = (f64, f64, f64, f64, f64, usize);
/// `(x1, y1, x2, y2, class_id)`
type GtTuple = (f64, f64, f64, f64, usize);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Shape { .. } | Error::NonFinite(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn det(t: &DetTuple) -> Detection {
    Detection { class_id: t.5, score: t.4, bbox: [t.0, t.1, t.2, t.3] }
}

fn det_tuple(d: &Detection) -> DetTuple {
    (d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3], d.score, d.class_id)
}

/// Nearest-neighbour upsampling of a flat NCHW array, optionally scaled by
/// the soft factor (`mode` is "hard", "area" or "linear").
#[pyfunction]
#[pyo3(signature = (values, shape, scale, mode = "area"))]
fn sni_upsample(values: Vec<f64>, shape: (usize, usize, usize, usize), scale: usize, mode: &str) -> PyResult<Vec<f64>> {
    let mode = match mode {
        "hard" => UpsampleMode::HardNn,
        "area" => UpsampleMode::Sni(AlphaMode::Area),
        "linear" => UpsampleMode::Sni(AlphaMode::Linear),
        _ => return Err(PyValueError::new_err(format!("unknown mode {mode:?}; expected hard, area or linear"))),
    };
    let x = Tensor::from_vec(&[shape.0, shape.1, shape.2, shape.3], values).map_err(to_py)?;
    let mut g = Graph::<f64>::new();
    let v = g.leaf(&x);
    let y = upsample(&mut g, v, scale, mode).map_err(to_py)?;
    Ok(g.value(y).to_vec())
}

/// Greedy per-class NMS; returns the kept detections in ranking order.
#[pyfunction]
fn nms(dets: Vec<DetTuple>, iou_threshold: f64) -> Vec<DetTuple> {
    let d: Vec<Detection> = dets.iter().map(det).collect();
    pnk::detector::nms(&d, iou_threshold).iter().map(det_tuple).collect()
}

/// COCO-style AP over IoU 0.50:0.95 with size bands. One list per image.
#[pyfunction]
#[pyo3(signature = (dets, gts, num_classes, image_size, conf = 0.0))]
fn average_precision(
    dets: Vec<Vec<DetTuple>>,
    gts: Vec<Vec<GtTuple>>,
    num_classes: usize,
    image_size: usize,
    conf: f64,
) -> PyResult<BTreeMap<String, f64>> {
    if dets.len() != gts.len() {
        return Err(PyValueError::new_err(format!(
            "{} detection lists for {} images",
            dets.len(),
            gts.len()
        )));
    }
    let d: Vec<Vec<Detection>> = dets.iter().map(|v| v.iter().map(det).collect()).collect();
    let g: Vec<Vec<Annotation>> = gts
        .iter()
        .map(|v| v.iter().map(|t| Annotation { class_id: t.4, bbox: [t.0, t.1, t.2, t.3] }).collect())
        .collect();
    let rep = metrics::average_precision(&d, &g, &metrics::coco_iou_thresholds(), conf, num_classes, image_size);
    Ok(rep.rows().into_iter().collect())
}

/// Parameter and FLOP counts of the model described by a config file.
#[pyfunction]
#[pyo3(signature = (config_path, image_size = None))]
fn model_cost(config_path: &str, image_size: Option<usize>) -> PyResult<(usize, u64)> {
    let cfg = ExperimentConfig::load(config_path).map_err(to_py)?;
    let (model, store) = Detector::build::<f32>(&cfg.model_spec(), cfg.train.seed).map_err(to_py)?;
    let s = image_size.unwrap_or(cfg.data.image_size);
    let flops = metrics::count_flops(&model, &store, &[1, 3, s, s]).map_err(to_py)?;
    Ok((metrics::count_params(&store), flops))
}

/// Synthetic shapes: a list of `(flat CHW image, [(x1, y1, x2, y2, class_id)])`.
#[pyfunction]
#[pyo3(signature = (seed, count, image_size = 64))]
fn synth(seed: u64, count: usize, image_size: usize) -> PyResult<Vec<(Vec<f32>, Vec<GtTuple>)>> {
    let (ds, _) = data::generate(&DatasetSpec::new(seed, count, image_size)).map_err(to_py)?;
    Ok(ds
        .records
        .iter()
        .map(|r| {
            let anns = r
                .annotations
                .iter()
                .map(|a| (a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3], a.class_id))
                .collect();
            (r.image.data().to_vec(), anns)
        })
        .collect())
}

/// One named finite-difference check: `(passed, max_rel_error, coordinates)`.
#[pyfunction]
fn gradcheck(name: &str, seed: u64) -> PyResult<(bool, f64, usize)> {
    let r = pnk::checks::run_check(name, seed).map_err(to_py)?;
    Ok((r.passed, r.max_rel_error, r.checked))
}

#[pymodule]
fn pnk_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(sni_upsample, m)?)?;
    m.add_function(wrap_pyfunction!(nms, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(model_cost, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
