//! Guided Backpropagation, Grad-CAM and Guided Grad-CAM saliency maps.
//!
//! All gradients target the pre-softmax logit and run through batch
//! normalization with running statistics.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fcn::network::{backprop, sample_in_layout};
use crate::fcn::{forward, input_batch, FcnModel, Mode, Real, ReluGate};
use crate::signal::{layout_dims, Layout, ReshapedInput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    GuidedBackprop,
    GradCam,
    GuidedGradCam,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::GuidedBackprop => "guided-backprop",
            Method::GradCam => "gradcam",
            Method::GuidedGradCam => "guided-gradcam",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Method::GuidedBackprop, Method::GradCam, Method::GuidedGradCam]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Relevance scores for one (input, class) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub method: Method,
    pub class: usize,
    /// Layout of the input the map was computed for.
    pub layout: Layout,
    pub t: usize,
    pub l: usize,
    pub dims: Vec<usize>,
    /// Flattened scores; multi-axis maps are time-major.
    pub scores: Vec<f64>,
    pub abs_applied: bool,
    pub interpolated: bool,
}

impl SaliencyMap {
    /// Scores as a time-major T×L table, when the map covers every lead.
    pub fn lead_time_table(&self) -> Option<Vec<f64>> {
        let (t, l) = (self.t, self.l);
        if self.scores.len() != t * l {
            return None;
        }
        match self.layout {
            Layout::Stacked => {
                let mut out = vec![0.0; t * l];
                for lead in 0..l {
                    for k in 0..t {
                        out[k * l + lead] = self.scores[lead * t + k];
                    }
                }
                Some(out)
            }
            Layout::MultiChannel | Layout::Image => Some(self.scores.clone()),
        }
    }

    /// Write the map as CSV plus a `<path>.meta` sidecar.
    pub fn write_csv(&self, path: &Path, lead_names: &[String]) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        match self.lead_time_table() {
            Some(table) => {
                writeln!(f, "t,{}", lead_names.join(","))?;
                for (k, row) in table.chunks(self.l).enumerate() {
                    let cells: Vec<String> = row.iter().map(|v| format!("{:e}", v + 0.0)).collect();
                    writeln!(f, "{k},{}", cells.join(","))?;
                }
            }
            None => {
                writeln!(f, "t,score")?;
                for (k, v) in self.scores.iter().enumerate() {
                    writeln!(f, "{k},{:e}", v + 0.0)?;
                }
            }
        }
        f.flush()?;
        let dims: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        std::fs::write(
            sidecar_path(path),
            format!(
                "method={}\nclass={}\nabs={}\nlayout={}\ndims={}\ninterpolated={}\n",
                self.method,
                self.class,
                self.abs_applied,
                self.layout,
                dims.join("x"),
                self.interpolated
            ),
        )?;
        Ok(())
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

fn check_classes<R: Real>(model: &FcnModel<R>, classes: &[usize]) -> Result<()> {
    let c = model.class_count();
    match classes.iter().find(|&&k| k >= c) {
        Some(&class) => Err(Error::ClassOutOfRange { class, class_count: c }),
        None => Ok(()),
    }
}

fn one_hot_logits(classes: &[usize], class_count: usize) -> Vec<f64> {
    let mut d = vec![0.0; classes.len() * class_count];
    for (b, &c) in classes.iter().enumerate() {
        d[b * class_count + c] = 1.0;
    }
    d
}

/// Guided Backpropagation for a batch of inputs, one target class each.
pub fn guided_backprop_batch<R: Real>(
    model: &FcnModel<R>,
    inputs: &[&ReshapedInput],
    classes: &[usize],
) -> Result<Vec<SaliencyMap>> {
    input_gradients(model, inputs, classes, ReluGate::Guided)
}

/// Gradient of the target logit w.r.t. the input under the given rectifier rule.
pub fn input_gradients<R: Real>(
    model: &FcnModel<R>,
    inputs: &[&ReshapedInput],
    classes: &[usize],
    gate: ReluGate,
) -> Result<Vec<SaliencyMap>> {
    check_lengths(inputs, classes)?;
    check_classes(model, classes)?;
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = &model.config;
    let cache = forward(model, input_batch::<R>(cfg, inputs)?, Mode::Inference)?;
    let d: Vec<R> = one_hot_logits(classes, model.class_count()).into_iter().map(R::of).collect();
    let out = backprop(model, &cache, &d, gate, false, true)?;
    let dx = out.input.expect("requested");
    let layout = cfg.variant.layout();
    Ok(classes
        .iter()
        .enumerate()
        .map(|(b, &class)| SaliencyMap {
            method: Method::GuidedBackprop,
            class,
            layout,
            t: cfg.t,
            l: cfg.l,
            dims: layout_dims(layout, cfg.t, cfg.l),
            scores: sample_in_layout(cfg, &dx, b),
            abs_applied: false,
            interpolated: false,
        })
        .collect())
}

pub fn guided_backprop<R: Real>(model: &FcnModel<R>, input: &ReshapedInput, class: usize) -> Result<SaliencyMap> {
    Ok(guided_backprop_batch(model, &[input], &[class])?.remove(0))
}

fn check_lengths(inputs: &[&ReshapedInput], classes: &[usize]) -> Result<()> {
    if inputs.len() != classes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} inputs but {} target classes",
            inputs.len(),
            classes.len()
        )));
    }
    Ok(())
}

/// `ReLU(Σ_j α_j · X_j)` with `α_j` the mean of `gradients[j]`.
pub fn gradcam_combine(features: &[Vec<f64>], gradients: &[Vec<f64>]) -> Result<Vec<f64>> {
    if features.len() != gradients.len() || features.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature maps vs {} gradient maps",
            features.len(),
            gradients.len()
        )));
    }
    let p = features[0].len();
    if features.iter().chain(gradients).any(|m| m.len() != p) || p == 0 {
        return Err(Error::ShapeMismatch("feature and gradient maps differ in size".into()));
    }
    let mut map = vec![0.0; p];
    for (x, g) in features.iter().zip(gradients) {
        let alpha = g.iter().sum::<f64>() / p as f64;
        for (m, &v) in map.iter_mut().zip(x) {
            *m += alpha * v;
        }
    }
    map.iter_mut().for_each(|m| *m = m.max(0.0));
    Ok(map)
}

/// Dimensions of a Grad-CAM map for a model.
pub fn gradcam_dims<R: Real>(model: &FcnModel<R>) -> Vec<usize> {
    let (h, w) = model.last_spatial();
    if model.variant().is_2d() {
        vec![h, w, 1]
    } else {
        vec![h]
    }
}

pub fn gradcam_batch<R: Real>(
    model: &FcnModel<R>,
    inputs: &[&ReshapedInput],
    classes: &[usize],
) -> Result<Vec<SaliencyMap>> {
    check_lengths(inputs, classes)?;
    check_classes(model, classes)?;
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = &model.config;
    let cache = forward(model, input_batch::<R>(cfg, inputs)?, Mode::Inference)?;
    let d: Vec<R> = one_hot_logits(classes, model.class_count()).into_iter().map(R::of).collect();
    let out = backprop(model, &cache, &d, ReluGate::Standard, false, false)?;
    let feats = cache.last_features();
    let grads = &out.last_features;
    let m = feats.channels;
    classes
        .iter()
        .enumerate()
        .map(|(b, &class)| {
            let x: Vec<Vec<f64>> = (0..m).map(|c| feats.map(c, b).iter().map(|v| v.f64()).collect()).collect();
            let g: Vec<Vec<f64>> = (0..m).map(|c| grads.map(c, b).iter().map(|v| v.f64()).collect()).collect();
            Ok(SaliencyMap {
                method: Method::GradCam,
                class,
                layout: cfg.variant.layout(),
                t: cfg.t,
                l: cfg.l,
                dims: gradcam_dims(model),
                scores: gradcam_combine(&x, &g)?,
                abs_applied: false,
                interpolated: false,
            })
        })
        .collect()
}

pub fn gradcam<R: Real>(model: &FcnModel<R>, input: &ReshapedInput, class: usize) -> Result<SaliencyMap> {
    Ok(gradcam_batch(model, &[input], &[class])?.remove(0))
}

/// Linear interpolation of a 1-D map onto `target` evenly spaced points
/// spanning the same interval; endpoints are preserved.
pub fn interpolate_map(map: &[f64], target: usize) -> Result<Vec<f64>> {
    let n = map.len();
    if n == 0 {
        return Err(Error::ShapeMismatch("cannot interpolate an empty map".into()));
    }
    if target < n {
        return Err(Error::Downsample { from: n, to: target });
    }
    if n == 1 {
        return Ok(vec![map[0]; target]);
    }
    if target == n {
        return Ok(map.to_vec());
    }
    let scale = (n - 1) as f64 / (target - 1) as f64;
    Ok((0..target)
        .map(|i| {
            let pos = i as f64 * scale;
            let k = (pos.floor() as usize).min(n - 2);
            let frac = pos - k as f64;
            if frac == 0.0 {
                map[k]
            } else if frac == 1.0 {
                map[k + 1]
            } else {
                map[k] + (map[k + 1] - map[k]) * frac
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CombineOptions {
    /// Stretch a coarser Grad-CAM map onto the input grid instead of failing.
    pub interpolate: bool,
    /// Take absolute values of the product.
    pub abs: bool,
}

/// Element-wise product of a Guided Backpropagation and a Grad-CAM map.
pub fn guided_gradcam_combine(guided: &SaliencyMap, cam: &SaliencyMap, opts: CombineOptions) -> Result<SaliencyMap> {
    if guided.class != cam.class {
        return Err(Error::InvalidConfig(format!(
            "maps target different classes ({} vs {})",
            guided.class, cam.class
        )));
    }
    let mismatch = || Error::DimensionMismatch {
        guided: guided.dims.clone(),
        gradcam: cam.dims.clone(),
    };
    let (cam_scores, interpolated) = if guided.dims == cam.dims {
        (cam.scores.clone(), false)
    } else if !opts.interpolate || cam.dims.len() != 1 {
        return Err(mismatch());
    } else {
        match guided.layout {
            Layout::Stacked => (interpolate_map(&cam.scores, guided.scores.len())?, true),
            Layout::MultiChannel => {
                // one score per time step, shared by every lead
                let per_time = interpolate_map(&cam.scores, guided.t)?;
                let spread = per_time.iter().flat_map(|&v| std::iter::repeat_n(v, guided.l)).collect();
                (spread, per_time.len() != cam.scores.len())
            }
            Layout::Image => return Err(mismatch()),
        }
    };
    let mut scores: Vec<f64> = guided.scores.iter().zip(&cam_scores).map(|(b, c)| b * c).collect();
    if opts.abs {
        scores.iter_mut().for_each(|v| *v = v.abs());
    }
    Ok(SaliencyMap {
        method: Method::GuidedGradCam,
        class: guided.class,
        layout: guided.layout,
        t: guided.t,
        l: guided.l,
        dims: guided.dims.clone(),
        scores,
        abs_applied: opts.abs,
        interpolated,
    })
}

pub fn guided_gradcam_batch<R: Real>(
    model: &FcnModel<R>,
    inputs: &[&ReshapedInput],
    classes: &[usize],
    opts: CombineOptions,
) -> Result<Vec<SaliencyMap>> {
    let guided = guided_backprop_batch(model, inputs, classes)?;
    let cams = gradcam_batch(model, inputs, classes)?;
    guided.iter().zip(&cams).map(|(g, c)| guided_gradcam_combine(g, c, opts)).collect()
}

pub fn guided_gradcam<R: Real>(
    model: &FcnModel<R>,
    input: &ReshapedInput,
    class: usize,
    opts: CombineOptions,
) -> Result<SaliencyMap> {
    Ok(guided_gradcam_batch(model, &[input], &[class], opts)?.remove(0))
}

/// Min-max rescaling to [0, 1] for display; a constant map becomes zeros.
pub fn normalize_for_display(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(layout: Layout, t: usize, l: usize, dims: Vec<usize>, scores: Vec<f64>, method: Method) -> SaliencyMap {
        SaliencyMap {
            method,
            class: 0,
            layout,
            t,
            l,
            dims,
            scores,
            abs_applied: false,
            interpolated: false,
        }
    }

    #[test]
    fn gradcam_hand_evaluation() {
        let m = gradcam_combine(&[vec![1.0, 0.0, 3.0]], &[vec![2.0, 2.0, 2.0]]).unwrap();
        assert_eq!(m, vec![2.0, 0.0, 6.0]);
        let zero = gradcam_combine(&[vec![1.0, 2.0], vec![0.5, 4.0]], &[vec![-1.0, 0.0], vec![-3.0, -3.0]]).unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);
    }

    #[test]
    fn interpolation_cases() {
        assert_eq!(interpolate_map(&[0.0, 1.0], 3).unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(interpolate_map(&[4.0; 3], 7).unwrap(), vec![4.0; 7]);
        let src = [0.3, -1.0, 2.5, 7.0];
        let up = interpolate_map(&src, 7).unwrap();
        for (k, &v) in src.iter().enumerate() {
            assert_eq!(up[2 * k], v);
        }
        assert!(matches!(interpolate_map(&src, 2), Err(Error::Downsample { from: 4, to: 2 })));
    }

    #[test]
    fn product_rules() {
        let g = map(Layout::Image, 2, 1, vec![2, 1, 1], vec![-1.0, 2.0], Method::GuidedBackprop);
        let c = map(Layout::Image, 2, 1, vec![2, 1, 1], vec![3.0, 4.0], Method::GradCam);
        let abs = CombineOptions { abs: true, ..CombineOptions::default() };
        assert_eq!(guided_gradcam_combine(&g, &c, abs).unwrap().scores, vec![3.0, 8.0]);
        let zeros = map(Layout::Image, 2, 1, vec![2, 1, 1], vec![0.0, 0.0], Method::GradCam);
        assert_eq!(guided_gradcam_combine(&g, &zeros, abs).unwrap().scores, vec![0.0, 0.0]);
        let ones = map(Layout::Image, 2, 1, vec![2, 1, 1], vec![1.0, 1.0], Method::GuidedBackprop);
        assert_eq!(guided_gradcam_combine(&ones, &ones, CombineOptions::default()).unwrap().scores, vec![1.0, 1.0]);
    }

    #[test]
    fn mismatch_needs_explicit_interpolation() {
        let g = map(Layout::MultiChannel, 4, 2, vec![4, 2], vec![1.0; 8], Method::GuidedBackprop);
        let c = map(Layout::MultiChannel, 4, 2, vec![4], vec![0.0, 1.0, 2.0, 3.0], Method::GradCam);
        let err = guided_gradcam_combine(&g, &c, CombineOptions::default()).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
        assert!(err.to_string().contains("[4, 2]") && err.to_string().contains("[4]"));
        let opts = CombineOptions { interpolate: true, abs: false };
        let m = guided_gradcam_combine(&g, &c, opts).unwrap();
        assert_eq!(m.scores, vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);

        let gs = map(Layout::Stacked, 2, 2, vec![4], vec![1.0; 4], Method::GuidedBackprop);
        let cs = map(Layout::Stacked, 2, 2, vec![2], vec![0.0, 3.0], Method::GradCam);
        let m = guided_gradcam_combine(&gs, &cs, opts).unwrap();
        assert_eq!(m.scores, vec![0.0, 1.0, 2.0, 3.0]);
        assert!(m.interpolated);
    }

    #[test]
    fn stacked_maps_unfold_lead_major() {
        let m = map(Layout::Stacked, 2, 2, vec![4], vec![1.0, 2.0, 3.0, 4.0], Method::GuidedBackprop);
        assert_eq!(m.lead_time_table().unwrap(), vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn display_normalization() {
        assert_eq!(normalize_for_display(&[2.0, 4.0, 3.0]), vec![0.0, 1.0, 0.5]);
        assert_eq!(normalize_for_display(&[5.0, 5.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn csv_export_layouts() {
        let dir = tempfile::tempdir().unwrap();
        let names: Vec<String> = ["I", "II"].iter().map(|s| s.to_string()).collect();
        let full = map(Layout::Image, 2, 2, vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0], Method::GuidedGradCam);
        let p = dir.path().join("full.csv");
        full.write_csv(&p, &names).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,I,II");
        assert_eq!(text.lines().count(), 3);
        let meta = std::fs::read_to_string(sidecar_path(&p)).unwrap();
        assert!(meta.contains("method=guided-gradcam") && meta.contains("abs=false"));
        let cam = map(Layout::MultiChannel, 3, 2, vec![3], vec![0.0, 1.0, 2.0], Method::GradCam);
        let p = dir.path().join("cam.csv");
        cam.write_csv(&p, &names).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().next().unwrap(), "t,score");
    }
}
