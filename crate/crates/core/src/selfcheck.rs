//! Built-in verification suite: factorization oracle, gradient checks of
//! every differentiable operation and of a tiny end-to-end model, and
//! attention/softmax invariants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_pool, attention_pool_graph, AttentionBinding, AttentionParams};
use crate::error::Result;
use crate::fbp::{
    bilinear_pool_naive, fbp_forward, fbp_graph, reconstruct_w, FbpBinding, FbpParams,
};
use crate::gradcheck::{check_gradients, GradCheckConfig};
use crate::model::{AudioEncoderConfig, ModelConfig, ModelInput, Network};
use crate::tensor::{Graph, LrnParams, NodeId, Tensor};

#[derive(Debug, Clone)]
pub struct SelfCheckConfig {
    pub seed: u64,
    /// Random instances for the oracle and invariant checks.
    pub instances: usize,
    /// Coordinates probed per gradient case.
    pub coordinates: usize,
    /// Offset added to analytic gradients; nonzero values must make the
    /// gradient checks fail.
    pub perturb_analytic: f64,
}

impl Default for SelfCheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 1000,
            coordinates: 100,
            perturb_analytic: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelfCheckReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.outcomes.iter().filter(|o| !o.passed)
    }
}

type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

/// One gradient-check target: a scalar-valued graph over `inputs`.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("positive shape")
}

fn param(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    random(shape, -1.0, 1.0, rng).with_grad()
}

/// `Σ y ∘ r` for a fixed pseudo-random `r`, so every output element matters.
fn weighted_sum(g: &mut Graph, y: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random(g.shape(y), -1.0, 1.0, &mut rng);
    let r = g.constant(r);
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor>,
    build: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'static,
) -> GradCase {
    GradCase {
        name,
        inputs,
        build: Box::new(build),
    }
}

/// Every differentiable operation, the two model blocks, and a tiny
/// end-to-end model. Each case exposes at least 100 gradient coordinates.
pub fn gradient_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = vec![
        case(
            "matmul",
            vec![param(&[6, 10], r), param(&[10, 5], r)],
            |g, x| {
                let y = g.matmul(x[0], x[1])?;
                weighted_sum(g, y, 1)
            },
        ),
        case("transpose", vec![param(&[10, 11], r)], |g, x| {
            let y = g.transpose(x[0])?;
            weighted_sum(g, y, 2)
        }),
        case("add", vec![param(&[8, 7], r), param(&[8, 7], r)], |g, x| {
            let y = g.add(x[0], x[1])?;
            weighted_sum(g, y, 3)
        }),
        case(
            "add_row",
            vec![param(&[12, 9], r), param(&[9], r)],
            |g, x| {
                let y = g.add_row(x[0], x[1])?;
                weighted_sum(g, y, 4)
            },
        ),
        case(
            "add_channel",
            vec![param(&[4, 5, 6], r), param(&[4], r)],
            |g, x| {
                let y = g.add_channel(x[0], x[1])?;
                weighted_sum(g, y, 5)
            },
        ),
        case("mul", vec![param(&[8, 7], r), param(&[8, 7], r)], |g, x| {
            let y = g.mul(x[0], x[1])?;
            weighted_sum(g, y, 6)
        }),
        case("scale", vec![param(&[11, 11], r)], |g, x| {
            let y = g.scale(x[0], -2.5);
            weighted_sum(g, y, 7)
        }),
        case("tanh", vec![param(&[11, 11], r)], |g, x| {
            let y = g.tanh(x[0]);
            weighted_sum(g, y, 8)
        }),
        case("relu", vec![param(&[11, 11], r)], |g, x| {
            let y = g.relu(x[0]);
            weighted_sum(g, y, 9)
        }),
        case("sum", vec![param(&[3, 6, 7], r)], |g, x| {
            let y = g.sum(x[0]);
            let y = g.tanh(y);
            weighted_sum(g, y, 10)
        }),
        case("reshape", vec![param(&[6, 20], r)], |g, x| {
            let y = g.reshape(x[0], &[4, 30])?;
            weighted_sum(g, y, 11)
        }),
        case("concat", vec![param(&[60], r), param(&[50], r)], |g, x| {
            let y = g.concat(&[x[0], x[1]])?;
            weighted_sum(g, y, 12)
        }),
        case(
            "conv2d",
            vec![param(&[2, 8, 9], r), param(&[3, 2, 3, 3], r)],
            |g, x| {
                let y = g.conv2d(x[0], x[1], 2, 1)?;
                weighted_sum(g, y, 13)
            },
        ),
        case("maxpool2d", vec![param(&[3, 8, 8], r)], |g, x| {
            let y = g.maxpool2d(x[0], 3, 2)?;
            weighted_sum(g, y, 14)
        }),
        case("local_response_norm", vec![param(&[7, 4, 5], r)], |g, x| {
            let p = LrnParams {
                size: 5,
                k: 2.0,
                alpha: 0.1,
                beta: 0.75,
            };
            let y = g.local_response_norm(x[0], p)?;
            weighted_sum(g, y, 15)
        }),
        case("scaled_softmax", vec![param(&[120], r)], |g, x| {
            let y = g.scaled_softmax(x[0], 0.8)?;
            weighted_sum(g, y, 16)
        }),
        case("sum_pool_segments", vec![param(&[120], r)], |g, x| {
            let y = g.sum_pool_segments(x[0], 4)?;
            weighted_sum(g, y, 17)
        }),
        case("l2_normalize", vec![param(&[110], r)], |g, x| {
            let y = g.l2_normalize(x[0]);
            weighted_sum(g, y, 18)
        }),
        case("dropout", vec![param(&[120], r)], |g, x| {
            let y = g.dropout(x[0], 0.3, true, 77)?;
            weighted_sum(g, y, 19)
        }),
        case("cross_entropy", vec![param(&[16, 7], r)], |g, x| {
            let labels: Vec<usize> = (0..16).map(|i| (i * 3) % 7).collect();
            g.cross_entropy(x[0], &labels)
        }),
    ];
    for (name, transformed) in [
        ("attention_audio_form", false),
        ("attention_video_form", true),
    ] {
        let (l, c, d) = (11, 6, 5);
        let inputs = vec![
            param(&[l, c], r),
            param(&[d, c], r),
            param(&[d], r),
            random(&[d], -2.0, 2.0, r).with_grad(),
        ];
        cases.push(case(name, inputs, move |g, x| {
            let b = AttentionBinding {
                weight: x[1],
                bias: x[2],
                score: x[3],
                lambda: 0.9,
                pool_transformed: transformed,
            };
            let out = attention_pool_graph(g, x[0], &b)?;
            weighted_sum(g, out.pooled, 20)
        }));
    }
    let (m, n, k, o) = (6, 5, 3, 4);
    cases.push(case(
        "fbp",
        vec![
            param(&[m], r),
            param(&[n], r),
            param(&[m, k * o], r),
            param(&[n, k * o], r),
        ],
        move |g, x| {
            let b = FbpBinding {
                audio_proj: x[2],
                video_proj: x[3],
                k,
                dropout_p: 0.3,
            };
            let out = fbp_graph(g, x[0], x[1], &b, false, 0)?;
            weighted_sum(g, out.fused, 21)
        },
    ));
    cases.push(end_to_end_case(r));
    cases
}

/// Tiny encoder, L_v = 3, C = 8, o = 4, k = 2.
fn end_to_end_case(rng: &mut ChaCha8Rng) -> GradCase {
    let cfg = ModelConfig {
        lambda_audio: 0.7,
        lambda_video: 1.0,
        reduced_video_dim: 5,
        fbp_o: 4,
        fbp_k: 2,
        encoder: AudioEncoderConfig::tiny(),
        seed: rng.gen(),
        ..ModelConfig::default()
    };
    let net = Network::init(&cfg, 8).expect("valid tiny configuration");
    let count = net.named_tensors().len();
    let mut inputs: Vec<Tensor> = net
        .tensors()
        .map(|t| random(t.shape(), -0.6, 0.6, rng).with_grad())
        .collect();
    inputs.push(random(&[1, 13, 15], 0.0, 2.0, rng));
    inputs.push(random(&[3, 8], -1.5, 1.5, rng));
    case("end_to_end_tiny_model", inputs, move |g, x| {
        let input = ModelInput {
            spectrogram: g.value(x[count]).clone(),
            video: g.value(x[count + 1]).clone(),
        };
        let nodes = net.forward_graph(g, &x[..count], &input, false, 0)?;
        g.cross_entropy(nodes.logits, &[2])
    })
}

pub fn gradient_suite(cfg: &SelfCheckConfig) -> Result<Vec<CheckOutcome>> {
    let gc = GradCheckConfig {
        coordinates: cfg.coordinates,
        seed: cfg.seed,
        perturb_analytic: cfg.perturb_analytic,
        ..GradCheckConfig::default()
    };
    gradient_cases(cfg.seed)
        .into_iter()
        .map(|c| {
            let report = check_gradients(&c.build, &c.inputs, &gc)?;
            let enough = report.checks.len() >= cfg.coordinates.min(100);
            Ok(CheckOutcome {
                name: format!("gradient/{}", c.name),
                passed: report.passed() && enough,
                detail: format!(
                    "{} coordinates, max relative error {:.2e}",
                    report.checks.len(),
                    report.max_rel_error()
                ),
            })
        })
        .collect()
}

fn small_params(m: usize, n: usize, k: usize, o: usize, rng: &mut ChaCha8Rng) -> FbpParams {
    FbpParams::new(
        random(&[m, k * o], -1.0, 1.0, rng),
        random(&[n, k * o], -1.0, 1.0, rng),
        k,
        o,
        0.3,
    )
    .expect("consistent shapes")
}

/// Max absolute gap between eval-mode FBP before normalization and the
/// naive bilinear form with the reconstructed tensor, over random instances
/// with m, n ≤ 8, k ≤ 4, o ≤ 6.
pub fn factorization_gap(instances: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (m, n) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let (k, o) = (rng.gen_range(1..=4), rng.gen_range(1..=6));
        let p = small_params(m, n, k, o, &mut rng);
        let a = random(&[m], -2.0, 2.0, &mut rng).into_data();
        let v = random(&[n], -2.0, 2.0, &mut rng).into_data();
        let fast = fbp_forward(&a, &v, &p, false, 0)?;
        let naive = bilinear_pool_naive(&a, &v, &reconstruct_w(&p))?;
        for (x, y) in fast.pre_norm.iter().zip(&naive) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(worst)
}

fn attention_instance(rng: &mut ChaCha8Rng, lambda: f64) -> (Tensor, AttentionParams) {
    let (l, c, d) = (
        rng.gen_range(1..20),
        rng.gen_range(1..8),
        rng.gen_range(1..8),
    );
    let transformed = rng.gen();
    let x = random(&[l, c], -3.0, 3.0, rng);
    let p = AttentionParams::new(
        random(&[d, c], -1.0, 1.0, rng),
        random(&[d], -1.0, 1.0, rng),
        random(&[d], -2.0, 2.0, rng),
        lambda,
        transformed,
    )
    .expect("consistent shapes");
    (x, p)
}

fn pooled_source(x: &Tensor, p: &AttentionParams) -> Vec<Vec<f64>> {
    let c = x.shape()[1];
    let rows = x.data().chunks(c).map(<[f64]>::to_vec);
    if !p.pool_transformed {
        return rows.collect();
    }
    rows.map(|row| {
        (0..p.hidden_dim())
            .map(|i| {
                let w = &p.weight.data()[i * c..(i + 1) * c];
                w.iter().zip(&row).map(|(a, b)| a * b).sum::<f64>() + p.bias.data()[i]
            })
            .collect()
    })
    .collect()
}

/// Worst deviations of the attention/softmax invariants over random instances.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AttentionInvariants {
    pub weight_sum: f64,
    pub negative_weight: bool,
    pub mean_pooling: f64,
    pub permutation: f64,
    pub softmax_shift: f64,
    pub softmax_sum: f64,
}

pub fn attention_invariants(instances: usize, seed: u64) -> Result<AttentionInvariants> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = AttentionInvariants::default();
    for _ in 0..instances {
        let lambda = rng.gen_range(0.0..=1.0);
        let (x, p) = attention_instance(&mut rng, lambda);
        let res = attention_pool(&x, &p)?;
        out.weight_sum = out
            .weight_sum
            .max((res.weights.iter().sum::<f64>() - 1.0).abs());
        out.negative_weight |= res.weights.iter().any(|&w| w < 0.0);

        // λ = 0 pools to the plain mean
        let (x0, p0) = attention_instance(&mut rng, 0.0);
        let res0 = attention_pool(&x0, &p0)?;
        let rows = pooled_source(&x0, &p0);
        for (j, v) in res0.pooled.iter().enumerate() {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
            out.mean_pooling = out.mean_pooling.max((v - mean).abs());
        }

        // permuting the elements permutes the weights
        let (l, c) = (x.shape()[0], x.shape()[1]);
        let mut perm: Vec<usize> = (0..l).collect();
        for i in (1..l).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let permuted: Vec<f64> = perm
            .iter()
            .flat_map(|&i| x.data()[i * c..(i + 1) * c].to_vec())
            .collect();
        let res_p = attention_pool(&Tensor::new(&[l, c], permuted)?, &p)?;
        for (pos, &src) in perm.iter().enumerate() {
            out.permutation = out
                .permutation
                .max((res_p.weights[pos] - res.weights[src]).abs());
        }

        // softmax shift invariance and normalization
        let len = rng.gen_range(1..30);
        let e: Vec<f64> = (0..len).map(|_| rng.gen_range(-20.0..20.0)).collect();
        let shift = rng.gen_range(-50.0..50.0);
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(e.clone())?);
        let b = g.constant(Tensor::from_vec(e.iter().map(|v| v + shift).collect())?);
        let sa = g.scaled_softmax(a, lambda)?;
        let sb = g.scaled_softmax(b, lambda)?;
        out.softmax_sum = out
            .softmax_sum
            .max((g.data(sa).iter().sum::<f64>() - 1.0).abs());
        for (u, v) in g.data(sa).iter().zip(g.data(sb)) {
            out.softmax_shift = out.softmax_shift.max((u - v).abs());
        }
    }
    Ok(out)
}

pub fn run(cfg: &SelfCheckConfig) -> Result<SelfCheckReport> {
    let mut outcomes = Vec::new();
    let gap = factorization_gap(cfg.instances, cfg.seed)?;
    outcomes.push(CheckOutcome {
        name: "fbp/factorization_equivalence".into(),
        passed: gap < 1e-10,
        detail: format!("{} instances, max abs gap {gap:.2e}", cfg.instances),
    });
    outcomes.extend(gradient_suite(cfg)?);
    let inv = attention_invariants(cfg.instances, cfg.seed.wrapping_add(1))?;
    let mut push = |name: &str, passed: bool, detail: String| {
        outcomes.push(CheckOutcome {
            name: name.into(),
            passed,
            detail,
        })
    };
    push(
        "attention/weights_sum_to_one",
        inv.weight_sum < 1e-10 && !inv.negative_weight,
        format!("max |Σα − 1| {:.2e}", inv.weight_sum),
    );
    push(
        "attention/zero_lambda_mean_pooling",
        inv.mean_pooling < 1e-10,
        format!("max gap {:.2e}", inv.mean_pooling),
    );
    push(
        "attention/permutation_equivariance",
        inv.permutation < 1e-10,
        format!("max gap {:.2e}", inv.permutation),
    );
    push(
        "softmax/shift_invariance",
        inv.softmax_shift < 1e-10,
        format!("max gap {:.2e}", inv.softmax_shift),
    );
    push(
        "softmax/sums_to_one",
        inv.softmax_sum < 1e-10,
        format!("max |Σ − 1| {:.2e}", inv.softmax_sum),
    );
    Ok(SelfCheckReport { outcomes })
}
