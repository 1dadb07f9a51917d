//! Double-precision gradient checking of the full network loss against
//! central finite differences, with parameters sampled across every
//! component group that owns any.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::Graph;
use crate::data::phantom::{generate_phantom, PhantomSpec};
use crate::error::Result;
use crate::loss::{graph_dice_ce, one_hot, OneHotMask};
use crate::model::{ModelConfig, Network};
use crate::params::{seeded_rng, ParamGroup, ParamId};
use crate::tensor::Tensor;

const FD_STEP: f64 = 1e-5;
const ZERO_TOL: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub element: usize,
    pub group: ParamGroup,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub per_group: BTreeMap<&'static str, usize>,
    pub worst: Option<GradCheckEntry>,
}

fn loss_value(net: &Network<f64>, image: &Tensor<f64>, gt: &OneHotMask) -> Result<f64> {
    let mut g = Graph::new(false);
    let out = net.forward(&mut g, image)?;
    let loss = graph_dice_ce(&mut g, out.logits, gt);
    Ok(g.value(loss).item())
}

/// Check `n_params` randomly chosen scalars, stratified round-robin over
/// the component groups that own parameters. A pair (analytic, numeric)
/// that is zero on both sides counts as a pass.
pub fn grad_check(cfg: &ModelConfig, n_params: usize, seed: u64) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut net = Network::<f64>::new(cfg.clone(), seed)?;
    let grid = cfg.input_size[0];
    let (img_vol, lbl_vol) = generate_phantom(&PhantomSpec {
        grid_size: grid,
        num_classes: cfg.num_classes,
        shapes_per_class: 1,
        noise_sigma: 0.05,
        seed,
    })?;
    let image = Tensor::<f64>::from_f64_slice(
        &[1, grid, grid, grid],
        &img_vol.data.iter().map(|&x| x as f64).collect::<Vec<_>>(),
    );
    let gt = one_hot(&lbl_vol.data, lbl_vol.spatial(), cfg.num_classes)?;

    // analytic gradients from one forward/backward
    net.store.zero_grads();
    {
        let mut g = Graph::new(true);
        let out = net.forward(&mut g, &image)?;
        let loss = graph_dice_ce(&mut g, out.logits, &gt);
        g.backward(loss, &mut net.store, &[]);
    }
    let analytic: Vec<Vec<f64>> = net
        .store
        .ids()
        .map(|id| net.store.grad(id).to_f64_vec())
        .collect();

    // group -> parameter ids that own scalars
    let mut groups: BTreeMap<&'static str, Vec<ParamId>> = BTreeMap::new();
    for id in net.store.ids() {
        if net.store.tensor(id).numel() > 0 {
            groups
                .entry(net.store.group(id).label())
                .or_default()
                .push(id);
        }
    }
    let group_list: Vec<&'static str> = groups.keys().copied().collect();
    let mut rng = seeded_rng(seed, "gradcheck-pick", 0);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        per_group: BTreeMap::new(),
        worst: None,
    };
    for i in 0..n_params {
        let gname = group_list[i % group_list.len()];
        let ids = &groups[gname];
        let id = ids[rng.gen_range(0..ids.len())];
        let numel = net.store.tensor(id).numel();
        let elem = rng.gen_range(0..numel);
        let an = analytic[id.0][elem];

        let orig = net.store.tensor(id).data()[elem];
        net.store.tensor_mut(id).data_mut()[elem] = orig + FD_STEP;
        let lp = loss_value(&net, &image, &gt)?;
        net.store.tensor_mut(id).data_mut()[elem] = orig - FD_STEP;
        let lm = loss_value(&net, &image, &gt)?;
        net.store.tensor_mut(id).data_mut()[elem] = orig;
        let fd = (lp - lm) / (2.0 * FD_STEP);

        let rel = if an.abs() < ZERO_TOL && fd.abs() < ZERO_TOL {
            0.0
        } else {
            (an - fd).abs() / an.abs().max(fd.abs())
        };
        *report.per_group.entry(gname).or_insert(0) += 1;
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some(GradCheckEntry {
                name: net.store.name(id).to_string(),
                element: elem,
                group: net.store.group(id),
                analytic: an,
                numeric: fd,
                rel_err: rel,
            });
        }
    }
    Ok(report)
}

/// Fraction of parameters with a non-zero accumulated gradient after one
/// backward pass, per component group.
pub fn gradient_flow_fractions(cfg: &ModelConfig, seed: u64) -> Result<BTreeMap<&'static str, f64>> {
    let mut net = Network::<f64>::new(cfg.clone(), seed)?;
    let grid = cfg.input_size[0];
    let (img_vol, lbl_vol) = generate_phantom(&PhantomSpec {
        grid_size: grid,
        num_classes: cfg.num_classes,
        shapes_per_class: 1,
        noise_sigma: 0.05,
        seed: seed ^ 0xabcdef,
    })?;
    let image = Tensor::<f64>::from_f64_slice(
        &[1, grid, grid, grid],
        &img_vol.data.iter().map(|&x| x as f64).collect::<Vec<_>>(),
    );
    let gt = one_hot(&lbl_vol.data, lbl_vol.spatial(), cfg.num_classes)?;
    net.store.zero_grads();
    let mut g = Graph::new(true);
    let out = net.forward(&mut g, &image)?;
    let loss = graph_dice_ce(&mut g, out.logits, &gt);
    g.backward(loss, &mut net.store, &[]);
    drop(g);

    let mut nonzero: BTreeMap<&'static str, (usize, usize)> = BTreeMap::new();
    for id in net.store.ids() {
        let e = nonzero.entry(net.store.group(id).label()).or_insert((0, 0));
        for &v in net.store.grad(id).data() {
            e.1 += 1;
            if v != 0.0 {
                e.0 += 1;
            }
        }
    }
    Ok(nonzero
        .into_iter()
        .map(|(k, (nz, tot))| (k, nz as f64 / tot.max(1) as f64))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets;

    #[test]
    fn stratified_sampling_covers_local_and_global() {
        let cfg = presets::tiny_16();
        let report = grad_check(&cfg, 12, 3).unwrap();
        assert_eq!(report.checked, 12);
        assert!(report.per_group.get("local_encoder").copied().unwrap_or(0) >= 1);
        assert!(report.per_group.get("global_encoder").copied().unwrap_or(0) >= 1);
        assert!(report.per_group.get("mixer").copied().unwrap_or(0) >= 1);
        assert!(report.per_group.get("decoder").copied().unwrap_or(0) >= 1);
        assert!(
            report.max_rel_err <= 1e-3,
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn zero_zero_counts_as_pass() {
        // relu dead units guarantee some exactly-zero gradients exist in a
        // typical run; the rel-err rule maps (0, 0) to 0 rather than NaN
        let a: f64 = 0.0;
        let fd: f64 = 0.0;
        let rel = if a.abs() < ZERO_TOL && fd.abs() < ZERO_TOL {
            0.0
        } else {
            (a - fd).abs() / a.abs().max(fd.abs())
        };
        assert_eq!(rel, 0.0);
    }
}
