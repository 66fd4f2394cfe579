//! Independent reference implementations the library is checked against.
#![allow(dead_code)]

use std::collections::VecDeque;
use std::path::Path;

use pxadapt::adapters::{fit_contrastive, save_contrastive, ContrastiveConfig, ReferenceReduction};
use pxadapt::eval::read_report;
use pxadapt::feature_store::{
    read_feature_map, read_label_mask, write_feature_map, write_label_mask, FeatureMap, LabelMask,
};
use pxadapt::nn::{backward, cross_entropy, forward, softmax, Activation, MlpModel};
use pxadapt::pipeline::{run_pipeline, Adapter, Connectivity, PipelineConfig, TargetSlice, Template};
use pxadapt::sampling::sample_contrastive_pairs_pooled;
use pxadapt::synth::{generate, ScenarioSpec};

/// Scalar test loss on a model output: cross-entropy against `target` plus a
/// fixed linear term, so every output coordinate carries gradient.
pub fn test_loss(output: &[f64], target: usize, weights: &[f64]) -> (f64, Vec<f64>) {
    let (ce, mut grad) = cross_entropy(&softmax(output), target).unwrap();
    let mut loss = ce;
    for ((g, w), y) in grad.iter_mut().zip(weights).zip(output) {
        loss += w * y;
        *g += w;
    }
    (loss, grad)
}

/// True when some ReLU pre-activation is closer to its kink than `margin`,
/// where finite differences are not meaningful.
pub fn near_kink(model: &MlpModel, input: &[f64], margin: f64) -> bool {
    let acts = forward(model, input).unwrap();
    model
        .layers()
        .iter()
        .zip(&acts.pre)
        .any(|(l, pre)| l.spec.activation == Activation::Relu && pre.iter().any(|z| z.abs() < margin))
}

/// Worst relative error between analytic and central-difference gradients,
/// over all parameters and input coordinates. The denominator is floored at
/// `floor` so coordinates with (near) zero gradient are compared absolutely.
pub fn gradient_check(
    model: &MlpModel,
    input: &[f64],
    target: usize,
    weights: &[f64],
    step: f64,
    floor: f64,
) -> f64 {
    let loss_at = |m: &MlpModel, x: &[f64]| test_loss(&forward(m, x).unwrap().output, target, weights).0;
    let acts = forward(model, input).unwrap();
    let (_, grad_out) = test_loss(&acts.output, target, weights);
    let grads = backward(model, &acts, &grad_out).unwrap();
    let analytic_params: Vec<f64> = grads.parameters().copied().collect();

    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(floor);
    let mut worst: f64 = 0.0;
    for (k, &a) in analytic_params.iter().enumerate() {
        let mut plus = model.clone();
        *plus.parameters_mut().nth(k).unwrap() += step;
        let mut minus = model.clone();
        *minus.parameters_mut().nth(k).unwrap() -= step;
        let numeric = (loss_at(&plus, input) - loss_at(&minus, input)) / (2.0 * step);
        worst = worst.max(rel(a, numeric));
    }
    for (i, &a) in grads.input.iter().enumerate() {
        let mut xp = input.to_vec();
        xp[i] += step;
        let mut xm = input.to_vec();
        xm[i] -= step;
        let numeric = (loss_at(model, &xp) - loss_at(model, &xm)) / (2.0 * step);
        worst = worst.max(rel(a, numeric));
    }
    worst
}

/// Component sizes by breadth-first flood fill, in raster order of each
/// component's first pixel.
pub fn bfs_component_sizes(mask: &LabelMask, eight: bool) -> Vec<usize> {
    let (h, w) = (mask.height(), mask.width());
    let labels = mask.labels();
    let mut seen = vec![false; h * w];
    let mut sizes = Vec::new();
    for start in 0..h * w {
        if seen[start] || labels[start] == 0 {
            continue;
        }
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (r, c) = ((i / w) as i64, (i % w) as i64);
            for (dr, dc) in [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)] {
                if !eight && dr != 0 && dc != 0 {
                    continue;
                }
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                    continue;
                }
                let j = (nr * w as i64 + nc) as usize;
                if !seen[j] && labels[j] == labels[start] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    sizes
}

/// Independent filter: keep a pixel iff its BFS component has at least
/// `min_size` pixels.
pub fn bfs_filter(mask: &LabelMask, eight: bool, min_size: usize) -> LabelMask {
    let (h, w) = (mask.height(), mask.width());
    let labels = mask.labels();
    let mut out = vec![0u8; h * w];
    let mut seen = vec![false; h * w];
    for start in 0..h * w {
        if seen[start] || labels[start] == 0 {
            continue;
        }
        seen[start] = true;
        let mut members = vec![start];
        let mut cursor = 0;
        while cursor < members.len() {
            let i = members[cursor];
            cursor += 1;
            let (r, c) = ((i / w) as i64, (i % w) as i64);
            for dr in -1..=1i64 {
                for dc in -1..=1i64 {
                    if (dr, dc) == (0, 0) || (!eight && dr != 0 && dc != 0) {
                        continue;
                    }
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h as i64 || nc >= w as i64 {
                        continue;
                    }
                    let j = (nr * w as i64 + nc) as usize;
                    if !seen[j] && labels[j] == labels[start] {
                        seen[j] = true;
                        members.push(j);
                    }
                }
            }
        }
        if members.len() >= min_size {
            for i in members {
                out[i] = labels[start];
            }
        }
    }
    LabelMask::new(h, w, mask.label_count(), out).unwrap()
}

/// Per-pixel cosine against the template of `label`, written as a plain
/// loop: the mean of unit-length region vectors (`max = false`) or the best
/// single region vector (`max = true`).
pub fn brute_force_cosine(
    template: &FeatureMap,
    mask: &LabelMask,
    label: u8,
    target: &FeatureMap,
    max: bool,
) -> Vec<f64> {
    let dim = template.dim();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut region = Vec::new();
    for i in 0..mask.pixel_count() {
        if mask.labels()[i] == label {
            let v: Vec<f64> = template.at_index(i).iter().map(|&x| x as f64).collect();
            let n = norm(&v);
            region.push(if n < 1e-12 { vec![0.0; dim] } else { v.iter().map(|x| x / n).collect() });
        }
    }
    let templates = if max {
        region
    } else {
        let mut mean = vec![0.0; dim];
        for v in &region {
            for d in 0..dim {
                mean[d] += v[d];
            }
        }
        vec![mean.iter().map(|m| m / region.len() as f64).collect()]
    };
    let mut out = Vec::with_capacity(target.pixel_count());
    for i in 0..target.pixel_count() {
        let x: Vec<f64> = target.at_index(i).iter().map(|&v| v as f64).collect();
        let mut best = f64::NEG_INFINITY;
        for t in &templates {
            let (nt, nx) = (norm(t), norm(&x));
            let cos = if nt < 1e-12 || nx < 1e-12 {
                0.0
            } else {
                let dot: f64 = t.iter().zip(&x).map(|(a, b)| a * b).sum();
                (dot / (nt * nx)).clamp(-1.0, 1.0)
            };
            best = best.max(cos);
        }
        out.push(best);
    }
    out
}

pub struct SeparableRun {
    pub report: pxadapt::eval::MetricReport,
    pub ious: Vec<(u8, f64)>,
    pub adapter: Adapter,
    pub template: Template,
}

/// The file-backed separable flow: generate slices to disk, read them back,
/// train the contrastive adapter on the training slices, save the model,
/// localize the held-out slices and write every artifact under `dir`.
pub fn separable_flow(
    dir: &Path,
    spec: &ScenarioSpec,
    train: &[usize],
    reduction: ReferenceReduction,
    seed: u64,
) -> SeparableRun {
    let scenario = generate(spec).unwrap();
    let data = dir.join("data");
    std::fs::create_dir_all(&data).unwrap();
    for (i, s) in scenario.slices.iter().enumerate() {
        write_feature_map(&s.features, data.join(format!("features_{i:03}.pxf"))).unwrap();
        write_label_mask(&s.mask, data.join(format!("mask_{i:03}.pxm"))).unwrap();
    }
    let load = |i: usize| {
        (
            read_feature_map(data.join(format!("features_{i:03}.pxf"))).unwrap(),
            read_label_mask(data.join(format!("mask_{i:03}.pxm"))).unwrap(),
        )
    };
    let slices: Vec<_> = (0..scenario.slices.len()).map(load).collect();
    let train_refs: Vec<_> = train.iter().map(|&i| (&slices[i].0, &slices[i].1)).collect();
    let pairs = sample_contrastive_pairs_pooled(&train_refs, 1000, 0, seed).unwrap();
    let (model, _) = fit_contrastive(&pairs, &ContrastiveConfig::default(), seed).unwrap();
    save_contrastive(&model, dir.join("model.pxc")).unwrap();

    let template = Template {
        features: slices[train[0]].0.clone(),
        mask: slices[train[0]].1.clone(),
    };
    let targets: Vec<TargetSlice> = (0..slices.len())
        .filter(|i| !train.contains(i))
        .map(|i| TargetSlice {
            index: i,
            features: slices[i].0.clone(),
            ground_truth: Some(slices[i].1.clone()),
            image: None,
            image_path: None,
        })
        .collect();
    let adapter = Adapter::Contrastive {
        model,
        k: 16,
        reduction,
        background_margin: 0.0,
    };
    let config = PipelineConfig {
        connectivity: Connectivity::Eight,
        seed,
        ..PipelineConfig::default()
    };
    let out = run_pipeline(&adapter, &template, &targets, &config).unwrap();
    out.write(dir.join("run")).unwrap();
    let report = read_report(dir.join("run/report.json")).unwrap();
    let ious = report.per_label.iter().map(|(l, m)| (*l, m.iou.unwrap())).collect();
    SeparableRun {
        report,
        ious,
        adapter,
        template,
    }
}
