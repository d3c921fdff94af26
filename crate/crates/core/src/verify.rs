//! Self-check suites runnable from the command line: 64-bit gradient
//! checks, the pooling oracle, routing isolation and the freeze policy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses::tape_losses;
use crate::model::{BreenConfig, BreenModel, Group};
use crate::numcore::{finite_difference_gradient, relative_error, Array, Real, Tape, FD_EPS};
use crate::registry::Registry;
use crate::sequence::{assemble_text, AssembledSequence, Stage};
use crate::teacher::{pool_grid, GridSource, TeacherFeatureGrid};
use crate::trainpipe::{train_step, Example, StageSpec, TrainState};

/// Largest per-group relative gradient error accepted by the grad suite.
pub const GRAD_TOLERANCE: f64 = 1e-3;
/// Largest absolute pooling deviation accepted by the pool suite.
pub const POOL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

pub trait Suite: Send + Sync {
    fn name(&self) -> &'static str;
    fn run(&self) -> Result<Vec<Check>>;
}

pub type SuiteCtor = fn() -> Box<dyn Suite>;

pub fn suite_registry() -> Registry<SuiteCtor> {
    Registry::<SuiteCtor>::new("verify suite")
        .register("grad", || Box::new(GradSuite))
        .register("pool", || Box::new(PoolSuite))
        .register("route", || Box::new(RouteSuite))
        .register("freeze", || Box::new(FreezeSuite))
}

/// Run one suite by name, or every suite for `"all"`.
pub fn run_suites(name: &str) -> Result<Vec<Check>> {
    let reg = suite_registry();
    let names = if name == "all" { reg.names() } else { vec![name] };
    let mut out = Vec::new();
    for n in names {
        out.extend(reg.get(n)?().run()?);
    }
    Ok(out)
}

/// A tiny model, an 8×16 image and pooled random teacher targets.
pub struct Fixture<T: Real> {
    pub model: BreenModel<T>,
    pub image: Image,
    pub seq: AssembledSequence,
    pub targets: Vec<(usize, Array<T>)>,
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Vec<u8> {
    (0..h * w * c).map(|_| rng.gen()).collect()
}

/// Deterministic tiny fixture. With `perturb`, every parameter gets extra
/// Gaussian noise so no group sits at a degenerate point (zero biases,
/// identical experts).
pub fn tiny_fixture(seed: u64, stage: Stage, perturb: f64) -> Result<Fixture<f32>> {
    let mut model = BreenModel::new(BreenConfig {
        seed,
        ..BreenConfig::tiny()
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf1c5);
    if perturb > 0.0 {
        let noise = Normal::new(0.0, perturb).expect("positive std");
        for p in model.params.iter_mut() {
            for v in p.value.data_mut() {
                *v += noise.sample(&mut rng) as f32;
            }
        }
    }
    let c = &model.config;
    let (h, w) = (2 * c.patch, 4 * c.patch);
    let pixels = random_image(&mut rng, h, w, c.channels);
    let image = Image::new(h, w, c.channels, pixels.iter().map(|&b| b as f32 / 255.0).collect())?;
    let g = c.teacher_grid;
    let dim = c.teacher_dim;
    let grid = TeacherFeatureGrid::new(
        g,
        dim,
        (0..g * g * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        GridSource::Synthetic,
    )?;
    let caption: Vec<u32> = (0..6).map(|_| rng.gen_range(0..c.vocab_size as u32)).collect();
    let n_img = model.image_tokens(h, w)?;
    let seq = model.assemble_pretrain(n_img, &caption, stage)?;
    let targets = model
        .layout
        .targets
        .iter()
        .map(|t| Ok((t.stride, pool_grid(&grid, t.stride)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Fixture {
        model,
        image,
        seq,
        targets,
    })
}

impl<T: Real> Fixture<T> {
    pub fn cast<U: Real>(&self) -> Fixture<U> {
        Fixture {
            model: self.model.cast(),
            image: self.image.clone(),
            seq: self.seq.clone(),
            targets: self.targets.iter().map(|(s, a)| (*s, a.cast())).collect(),
        }
    }

    /// The fixture as a training example (`T = f32` only makes sense here).
    pub fn example(&self) -> Example {
        Example {
            pixels: self.image.data().iter().map(|&v| (v * 255.0).round() as u8).collect(),
            height: self.image.height(),
            width: self.image.width(),
            seq: self.seq.clone(),
            targets: self.targets.iter().map(|(s, a)| (*s, a.cast())).collect(),
            answer: None,
        }
    }

    fn loss_on(&self, model: &BreenModel<T>, grads: bool) -> Result<(f64, Option<Vec<Array<T>>>)> {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, &|_| grads);
        let out = model.forward_on(&mut tape, &vars, Some(&self.image), &self.seq, false)?;
        let aligned = out
            .predictions
            .iter()
            .map(|&(s, v)| {
                let t = self.targets.iter().find(|(ts, _)| *ts == s).expect("target per stride");
                (s, v, t.1.clone())
            })
            .collect();
        let (alpha, beta) = (model.config.alpha, model.config.beta);
        let l = tape_losses(&mut tape, aligned, out.logits, &self.seq.lm_labels, alpha, beta)?;
        let value = tape.scalar(l.total).as_f64();
        if !grads {
            return Ok((value, None));
        }
        tape.backward(l.total)?;
        let g = vars
            .iter()
            .zip(model.params.iter())
            .map(|(&v, p)| tape.take_grad(v).unwrap_or_else(|| Array::zeros(p.value.shape())))
            .collect();
        Ok((value, Some(g)))
    }

    pub fn loss(&self) -> Result<f64> {
        Ok(self.loss_on(&self.model, false)?.0)
    }

    /// Analytic gradient for every parameter, in store order.
    pub fn gradients(&self) -> Result<Vec<Array<T>>> {
        Ok(self.loss_on(&self.model, true)?.1.expect("requested"))
    }
}

/// Max-norm relative error between tape gradients and central differences,
/// per parameter group.
pub fn group_gradient_errors(fix: &Fixture<f64>) -> Result<Vec<(Group, f64)>> {
    let analytic = fix.gradients()?;
    let mut out = Vec::new();
    for g in Group::ALL {
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for (i, p) in fix.model.params.iter().enumerate() {
            if p.group != g {
                continue;
            }
            let mut probe = fix.model.clone();
            let numeric = finite_difference_gradient(
                |theta| {
                    probe.params.at_mut(i).value = theta.clone();
                    fix.loss_on(&probe, false).map(|r| r.0).unwrap_or(f64::NAN)
                },
                &p.value,
                FD_EPS,
            );
            a.extend_from_slice(analytic[i].data());
            n.extend_from_slice(numeric.data());
        }
        if !a.is_empty() {
            out.push((g, relative_error(&a, &n)));
        }
    }
    Ok(out)
}

/// Window averages by explicit nested loops.
pub fn pool_reference(features: &[f32], g: usize, dim: usize, s: usize) -> Vec<f64> {
    let side = g / s;
    let mut out = vec![0.0; side * side * dim];
    for r in 0..side {
        for c in 0..side {
            for d in 0..dim {
                let mut acc = 0.0f64;
                for y in 0..s {
                    for x in 0..s {
                        acc += features[((r * s + y) * g + c * s + x) * dim + d] as f64;
                    }
                }
                out[(r * side + c) * dim + d] = acc / (s * s) as f64;
            }
        }
    }
    out
}

/// Largest deviation of `pool_grid` from [`pool_reference`] over random grids.
pub fn pool_oracle_error(trials: usize, seed: u64) -> Result<f64> {
    const STRIDES: [usize; 6] = [2, 3, 4, 6, 8, 12];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let (g, dim, s) = (24, 4, STRIDES[t % STRIDES.len()]);
        let features: Vec<f32> = (0..g * g * dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let grid = TeacherFeatureGrid::new(g, dim, features.clone(), GridSource::Synthetic)?;
        let pooled = pool_grid(&grid, s)?;
        let want = pool_reference(&features, g, dim, s);
        if pooled.len() != want.len() {
            return Err(Error::Geometry(format!("stride {s}: {} values, expected {}", pooled.len(), want.len())));
        }
        for (a, b) in pooled.data().iter().zip(&want) {
            worst = worst.max((*a as f64 - b).abs());
        }
    }
    Ok(worst)
}

/// Largest |gradient| reaching the image expert on a text-only sequence.
pub fn text_only_image_ffn_grad(seed: u64) -> Result<f64> {
    let fix = tiny_fixture(seed, Stage::Pretrain, 0.1)?;
    let ids: Vec<u32> = (0..8).map(|i| (i * 5 % fix.model.config.vocab_size) as u32).collect();
    let text = Fixture {
        seq: assemble_text(&ids)?,
        ..fix
    };
    let grads = text.gradients()?;
    Ok(text
        .model
        .params
        .iter()
        .zip(&grads)
        .filter(|(p, _)| p.group == Group::ImageFfn)
        .map(|(_, g)| g.max_abs() as f64)
        .fold(0.0, f64::max))
}

/// Whether the routed forward of a copy-initialized model equals the
/// single-FFN model bit for bit.
pub fn copy_init_matches_single_ffn(seed: u64) -> Result<bool> {
    let fix = tiny_fixture(seed, Stage::Pretrain, 0.0)?;
    let routed = fix.model.forward(Some(&fix.image), &fix.seq, false)?;
    let single = fix.model.without_image_expert().forward(Some(&fix.image), &fix.seq, false)?;
    let bits = |a: &Array<f32>| a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    Ok(bits(&routed.logits) == bits(&single.logits)
        && routed
            .query_out
            .iter()
            .zip(&single.query_out)
            .all(|((_, a), (_, b))| bits(a) == bits(b)))
}

/// Groups whose digest changed after one optimizer step of `stage`.
pub fn groups_changed_by_step(seed: u64, stage: Stage) -> Result<Vec<Group>> {
    let fix = tiny_fixture(seed, stage, 0.0)?;
    let mut model = fix.model.clone();
    let before: Vec<String> = Group::ALL.iter().map(|&g| model.params.group_digest(g)).collect();
    let spec = StageSpec {
        batch_size: 1,
        steps: 1,
        lr: 1e-2,
        ..StageSpec::desk(stage)
    };
    let mut state = TrainState::new(&model, spec, seed);
    let ex = fix.example();
    train_step(&mut model, &mut state, &[&ex], 1)?;
    Ok(Group::ALL
        .iter()
        .zip(&before)
        .filter(|(&g, d)| model.params.group_digest(g) != **d)
        .map(|(&g, _)| g)
        .collect())
}

struct GradSuite;
struct PoolSuite;
struct RouteSuite;
struct FreezeSuite;

impl Suite for GradSuite {
    fn name(&self) -> &'static str {
        "grad"
    }

    fn run(&self) -> Result<Vec<Check>> {
        let fix = tiny_fixture(11, Stage::Pretrain, 0.2)?.cast::<f64>();
        Ok(group_gradient_errors(&fix)?
            .into_iter()
            .map(|(g, e)| Check::new(format!("grad {g}"), e < GRAD_TOLERANCE, format!("rel err {e:.2e}")))
            .collect())
    }
}

impl Suite for PoolSuite {
    fn name(&self) -> &'static str {
        "pool"
    }

    fn run(&self) -> Result<Vec<Check>> {
        let e = pool_oracle_error(200, 2)?;
        Ok(vec![Check::new("pool vs nested loops", e < POOL_TOLERANCE, format!("max abs err {e:.2e}"))])
    }
}

impl Suite for RouteSuite {
    fn name(&self) -> &'static str {
        "route"
    }

    fn run(&self) -> Result<Vec<Check>> {
        let g = text_only_image_ffn_grad(5)?;
        let same = copy_init_matches_single_ffn(5)?;
        Ok(vec![
            Check::new("text-only image_ffn grad", g == 0.0, format!("max |grad| {g:e}")),
            Check::new(
                "copy-init routed == single ffn",
                same,
                if same { "bitwise equal" } else { "outputs differ" },
            ),
        ])
    }
}

impl Suite for FreezeSuite {
    fn name(&self) -> &'static str {
        "freeze"
    }

    fn run(&self) -> Result<Vec<Check>> {
        let mut out = Vec::new();
        for stage in [Stage::Prealign, Stage::Pretrain] {
            let changed = groups_changed_by_step(3, stage)?;
            let expected = crate::trainpipe::freeze_policy(stage);
            let ok = changed.iter().all(|g| expected.contains(g)) && expected.iter().all(|g| changed.contains(g));
            let names: Vec<&str> = changed.iter().map(|g| g.as_str()).collect();
            out.push(Check::new(format!("freeze {stage}"), ok, format!("changed: {}", names.join(", "))));
        }
        Ok(out)
    }
}
