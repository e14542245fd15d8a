//! Finite-difference suites over every differentiable operation and the
//! full networks, each repeated over many random seeds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmf::{GmfConfig, GmfModel, LossDraw, DiffusionExample};
use crate::gol::{Gol, GolConfig};
use crate::gradcheck::{check_inputs, check_params, random_projection, CheckResult, REL_TOLERANCE};
use crate::graph::{Graph, Var};
use crate::codec::LatentCodec;
use crate::parallel::{self, Execution};
use crate::param::ParamStore;
use crate::tensor::Tensor;
use crate::unet::{UNet, UNetConfig, INPUT_CHANNELS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub seeds: usize,
    pub first_seed: u64,
    /// Coordinates sampled per tensor in the network suites.
    pub network_coords: usize,
    pub include_networks: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seeds: 20,
            first_seed: 0,
            network_coords: 4,
            include_networks: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub seeds: usize,
    pub failed_seeds: Vec<u64>,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<String>,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.failed_seeds.is_empty() && self.max_rel_error < REL_TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub cases: Vec<CaseReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseReport::passed)
    }

    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let failed: Vec<&str> = self.cases.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
        Err(Error::Verification(format!("gradient checks failed: {}", failed.join(", "))))
    }
}

type Case = (&'static str, fn(u64, &SuiteConfig) -> Result<CheckResult>);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, rng)
}

/// Check an op over freshly drawn inputs, projected to a scalar with fixed random weights.
fn op<F>(name: &str, seed: u64, shapes: &[&[usize]], f: F) -> Result<CheckResult>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut r = rng(seed);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| randn(s, &mut r)).collect();
    let mut wr = rng(seed ^ 0xa5a5);
    let probe = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t)).collect();
        let out = f(&mut g, &vars)?;
        Tensor::rand_uniform(g.shape(out), -1.0, 1.0, &mut wr)
    };
    check_inputs(
        name,
        &inputs,
        |g, v| {
            let out = f(g, v)?;
            if g.shape(out).iter().product::<usize>() == 1 && g.shape(out).len() <= 1 {
                return Ok(out);
            }
            let w = g.constant(&probe);
            let p = g.mul(out, w)?;
            Ok(g.sum(p))
        },
        None,
        &mut r,
    )
}

fn op_cases() -> Vec<Case> {
    vec![
        ("add", |s, _| op("add", s, &[&[2, 3], &[2, 3]], |g, v| g.add(v[0], v[1]))),
        ("sub", |s, _| op("sub", s, &[&[2, 3], &[2, 3]], |g, v| g.sub(v[0], v[1]))),
        ("mul", |s, _| op("mul", s, &[&[2, 3], &[2, 3]], |g, v| g.mul(v[0], v[1]))),
        ("scale", |s, _| op("scale", s, &[&[5]], |g, v| Ok(g.scale(v[0], -1.7)))),
        ("sigmoid", |s, _| op("sigmoid", s, &[&[6]], |g, v| Ok(g.sigmoid(v[0])))),
        ("silu", |s, _| op("silu", s, &[&[6]], |g, v| Ok(g.silu(v[0])))),
        ("conv2d-3x3", |s, _| {
            op("conv2d-3x3", s, &[&[2, 2, 5, 5], &[3, 2, 3, 3]], |g, v| g.conv2d(v[0], v[1], 1, 1))
        }),
        ("conv2d-stride2", |s, _| {
            op("conv2d-stride2", s, &[&[1, 2, 6, 6], &[2, 2, 3, 3]], |g, v| g.conv2d(v[0], v[1], 2, 1))
        }),
        ("conv2d-1x1", |s, _| {
            op("conv2d-1x1", s, &[&[2, 3, 3, 4], &[2, 3, 1, 1]], |g, v| g.conv2d(v[0], v[1], 1, 0))
        }),
        ("add_channel", |s, _| {
            op("add_channel", s, &[&[2, 3, 2, 2], &[3]], |g, v| g.add_channel(v[0], v[1]))
        }),
        ("mul_channel", |s, _| {
            op("mul_channel", s, &[&[2, 1, 3, 3], &[2, 4, 3, 3]], |g, v| g.mul_channel(v[0], v[1]))
        }),
        ("linear", |s, _| {
            op("linear", s, &[&[3, 4], &[5, 4], &[5]], |g, v| g.linear(v[0], v[1], Some(v[2])))
        }),
        ("linear-no-bias", |s, _| op("linear-no-bias", s, &[&[3, 4], &[2, 4]], |g, v| g.linear(v[0], v[1], None))),
        ("matmul", |s, _| op("matmul", s, &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]))),
        ("transpose", |s, _| op("transpose", s, &[&[3, 4]], |g, v| g.transpose(v[0]))),
        ("softmax_rows", |s, _| op("softmax_rows", s, &[&[3, 5]], |g, v| g.softmax_rows(v[0]))),
        ("reshape", |s, _| op("reshape", s, &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4]))),
        ("upsample_nearest", |s, _| {
            op("upsample_nearest", s, &[&[1, 2, 2, 3]], |g, v| g.upsample_nearest(v[0], 2))
        }),
        ("concat-channels", |s, _| {
            op("concat-channels", s, &[&[1, 2, 2, 2], &[1, 3, 2, 2]], |g, v| g.concat(&[v[0], v[1]], 1))
        }),
        ("concat-width", |s, _| {
            op("concat-width", s, &[&[1, 2, 2, 2], &[1, 2, 2, 3]], |g, v| g.concat(&[v[0], v[1]], 3))
        }),
        ("narrow", |s, _| op("narrow", s, &[&[1, 2, 3, 6]], |g, v| g.narrow(v[0], 3, 2, 3))),
        ("space_to_depth", |s, _| {
            op("space_to_depth", s, &[&[1, 2, 4, 4]], |g, v| g.space_to_depth(v[0], 2))
        }),
        ("depth_to_space", |s, _| {
            op("depth_to_space", s, &[&[1, 8, 2, 2]], |g, v| g.depth_to_space(v[0], 2))
        }),
        ("sum", |s, _| op("sum", s, &[&[3, 3]], |g, v| Ok(g.sum(v[0])))),
        ("mse", |s, _| op("mse", s, &[&[2, 5], &[2, 5]], |g, v| g.mse(v[0], v[1]))),
        ("l2_norm", |s, _| op("l2_norm", s, &[&[7]], |g, v| Ok(g.l2_norm(v[0])))),
        ("sum_squares", |s, _| op("sum_squares", s, &[&[7]], |g, v| Ok(g.sum_squares(v[0])))),
    ]
}

/// Move every parameter off its initial value so no gradient sits at a
/// special point (zero-initialized output layers in particular).
fn perturb(store: &mut ParamStore, scale: f64, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        let noise = Tensor::rand_uniform(p.tensor.shape(), -scale, scale, rng);
        for (v, n) in p.tensor.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}

fn tiny_gol() -> GolConfig {
    GolConfig {
        channels: vec![2, 2, 3, 3, 2],
        mapping_channels: 3,
        ..GolConfig::default()
    }
}

fn tiny_unet() -> UNetConfig {
    UNetConfig {
        channels: vec![3, 4],
        time_dim: 4,
    }
}

fn gol_case(seed: u64, config: &SuiteConfig) -> Result<CheckResult> {
    let gol = Gol::new(tiny_gol())?;
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    gol.init(&mut store, &mut r)?;
    perturb(&mut store, 0.3, &mut r);
    let gi = Tensor::rand_uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut r);
    let go = Tensor::rand_uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut r);
    let zi = randn(&[4, 4, 4], &mut r);
    let zc = randn(&[4, 4, 4], &mut r);
    check_params(
        "gol",
        &store,
        |g, s| {
            let a = gol.attention_var(g, s, &gi, &go)?;
            gol.occlusion_loss_var(g, a, &zi, &zc)
        },
        Some(config.network_coords),
        &mut r,
    )
}

fn unet_case(seed: u64, config: &SuiteConfig) -> Result<CheckResult> {
    let unet = UNet::new(tiny_unet())?;
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    unet.init(&mut store, &mut r)?;
    perturb(&mut store, 0.2, &mut r);
    let x = randn(&[2, INPUT_CHANNELS, 4, 12], &mut r);
    let probe = rng(seed ^ 0x5a5a);
    check_params(
        "gmf-unet",
        &store,
        |g, s| {
            let xv = g.constant(&x);
            let out = unet.forward(g, s, xv, &[3, 17])?;
            random_projection(g, out, &mut probe.clone())
        },
        Some(config.network_coords),
        &mut r,
    )
}

/// The whole training loss, so gradients reach the occlusion network
/// through both the diffusion and the occlusion terms.
fn pipeline_case(seed: u64, config: &SuiteConfig) -> Result<CheckResult> {
    let model = GmfModel::new(
        GmfConfig {
            unet: tiny_unet(),
            gol: tiny_gol(),
            latent_shift: Some([4.0, 4.0, 4.0, 0.0]),
            ..GmfConfig::default()
        },
        LatentCodec::fixed(),
    )?;
    let mut r = rng(seed);
    let mut store = model.init(&mut r)?;
    perturb(&mut store, 0.2, &mut r);
    let image = |r: &mut ChaCha8Rng| Tensor::rand_uniform(&[3, 32, 32], 0.0, 1.0, r);
    let codec = &model.codec;
    let (inner, outer, person, agnostic, crop) = (image(&mut r), image(&mut r), image(&mut r), image(&mut r), image(&mut r));
    let ex = DiffusionExample {
        z_person: codec.encode(&person)?.data,
        z_agnostic: codec.encode(&agnostic)?.data,
        z_outer: codec.encode(&outer)?.data,
        z_inner: codec.encode(&inner)?.data,
        z_crop: codec.encode(&crop)?.data,
        mask: Tensor::from_fn(&[1, 4, 4], |i| (i % 3 == 0) as u8 as f64),
        inner_garment: inner,
        outer_garment: outer,
    };
    let draw = LossDraw {
        t: 1 + (seed as usize % model.schedule.steps()),
        noise: randn(&[1, 4, 4, 12], &mut r),
        dropped: false,
    };
    check_params(
        "gmf-pipeline",
        &store,
        |g, s| Ok(model.loss(g, s, &ex, &draw)?.0),
        Some(config.network_coords),
        &mut r,
    )
}

fn network_cases() -> Vec<Case> {
    vec![("gol", gol_case), ("gmf-unet", unet_case), ("gmf-pipeline", pipeline_case)]
}

/// Run every case over `config.seeds` seeds.
pub fn run(config: &SuiteConfig, exec: Execution) -> Result<SuiteReport> {
    if config.seeds == 0 {
        return Err(Error::Config("gradient suite needs at least one seed".into()));
    }
    let mut cases = op_cases();
    if config.include_networks {
        cases.extend(network_cases());
    }
    let jobs: Vec<(usize, u64)> = (0..cases.len())
        .flat_map(|c| (0..config.seeds as u64).map(move |s| (c, s)))
        .collect();
    let results = parallel::map(exec, &jobs, |&(c, s)| (cases[c].1)(config.first_seed + s, config));
    let mut reports: Vec<CaseReport> = cases
        .iter()
        .map(|(name, _)| CaseReport {
            name: name.to_string(),
            seeds: 0,
            failed_seeds: Vec::new(),
            checked: 0,
            max_rel_error: 0.0,
            worst: None,
        })
        .collect();
    for (&(c, s), res) in jobs.iter().zip(results) {
        let res = res?;
        let rep = &mut reports[c];
        rep.seeds += 1;
        rep.checked += res.checked;
        if !res.passed() {
            rep.failed_seeds.push(config.first_seed + s);
        }
        if res.max_rel_error > rep.max_rel_error || res.max_rel_error.is_nan() {
            rep.max_rel_error = res.max_rel_error;
            rep.worst = res.worst.map(|w| format!("seed {}: {w}", config.first_seed + s));
        }
    }
    Ok(SuiteReport {
        tolerance: REL_TOLERANCE,
        cases: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_suite_passes_on_a_few_seeds() {
        let cfg = SuiteConfig {
            seeds: 2,
            include_networks: false,
            ..SuiteConfig::default()
        };
        let report = run(&cfg, Execution::Sequential).unwrap();
        for c in &report.cases {
            assert!(c.passed(), "{c:?}");
            assert_eq!(c.seeds, 2);
        }
    }

    #[test]
    fn zero_seeds_is_a_config_error() {
        let cfg = SuiteConfig {
            seeds: 0,
            ..SuiteConfig::default()
        };
        assert!(matches!(run(&cfg, Execution::Sequential), Err(Error::Config(_))));
    }
}
