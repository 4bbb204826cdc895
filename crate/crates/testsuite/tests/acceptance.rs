//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use multiid::bench::{self, schema, templates};
use multiid::config::RunConfig;
use multiid::{cli, eval, imageio, run};
use multiid_core::array::RealArray;
use multiid_core::attention::{
    extended_self_attention, masked_cross_attention, plain_attention, BlockSet, EmbeddingBlock, FeatureCacheEntry,
    Gate, ProjectionSet,
};
use multiid_core::backend::{ImageCodec, InitialImageGenerator, LayerId, PlainHooks};
use multiid_core::mask::{rasterize_mask, BBox, SpatialMask};
use multiid_core::matching::{greedy_match, SimilarityMatrix};
use multiid_core::metrics::{aggregate, ImageMetrics, COLUMNS};
use multiid_core::pipeline::{
    ddim_invert, ddim_sample, null_conditioning, Background, DepthControl, GenerationRequest, IdReference,
    InversionOptions, Pipeline, PipelineConfig,
};
use multiid_core::schedule::{ddim_step, forward_noise, DdimSchedule, Direction, LatentState};
use multiid_core::toy::{toy_bundle, ToyDenoiser, ToyImageCodec, ToyInitialImageGenerator};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> RealArray {
    let n = shape.iter().product();
    RealArray::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> SpatialMask {
    let mut v: Vec<f64> = (0..h * w).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    let keep = rng.random_range(0..h * w);
    v[keep] = 1.0;
    SpatialMask::new(RealArray::new(&[h, w], v).unwrap(), None).unwrap()
}

// ---------------------------------------------------------------------------
// Reference attention: explicit per-key visibility, exp over visible keys only.

type Mat = Vec<Vec<f64>>;

fn to_mat(a: &RealArray) -> Mat {
    (0..a.rows()).map(|i| a.row(i).to_vec()).collect()
}

fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

/// `visible[q][k]` says whether key `k` takes part in query `q`'s softmax.
fn oracle_attention(x: &RealArray, source: &RealArray, visible: &[Vec<bool>], p: &ProjectionSet) -> Mat {
    let q = mat_mul(&to_mat(x), &to_mat(&p.w_q));
    let k = mat_mul(&to_mat(source), &to_mat(&p.w_k));
    let v = mat_mul(&to_mat(source), &to_mat(&p.w_v));
    let (dq, dv) = (q[0].len() / p.heads, v[0].len() / p.heads);
    let mut out = vec![vec![0.0; v[0].len()]; q.len()];
    for h in 0..p.heads {
        for (qi, qrow) in q.iter().enumerate() {
            let keys: Vec<usize> = (0..k.len()).filter(|&j| visible[qi][j]).collect();
            let logits: Vec<f64> = keys
                .iter()
                .map(|&j| (0..dq).map(|c| qrow[h * dq + c] * k[j][h * dq + c]).sum::<f64>() / (dq as f64).sqrt())
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = weights.iter().sum();
            for (w, &j) in weights.iter().zip(&keys) {
                for c in 0..dv {
                    out[qi][h * dv + c] += w / z * v[j][h * dv + c];
                }
            }
        }
    }
    out
}

fn max_diff(a: &RealArray, b: &Mat) -> f64 {
    b.iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().map(move |(j, v)| (a.row(i)[j] - v).abs()))
        .fold(0.0, f64::max)
}

struct Instance {
    h: usize,
    w: usize,
    x: RealArray,
    p: ProjectionSet,
}

fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let h = rng.random_range(1..=2);
    let w = rng.random_range(1..=4);
    let heads = rng.random_range(1..=2);
    let d = heads * rng.random_range(1..=3);
    let dv = heads * rng.random_range(1..=3);
    Instance {
        h,
        w,
        x: random(rng, &[h * w, d], 1.5),
        p: ProjectionSet::new(
            random(rng, &[d, d], 1.5),
            random(rng, &[d, d], 1.5),
            random(rng, &[d, dv], 1.5),
            heads,
        )
        .unwrap(),
    }
}

fn cross_blocks(rng: &mut ChaCha8Rng, inst: &Instance) -> BlockSet {
    let d = inst.x.cols();
    let n = rng.random_range(1..=3);
    let mut blocks = vec![EmbeddingBlock::global(random(rng, &[n, d], 1.5))];
    for i in 0..rng.random_range(0..=3) {
        let n = rng.random_range(1..=3);
        let tokens = random(rng, &[n, d], 1.5);
        blocks.push(EmbeddingBlock::local(i, tokens, random_mask(rng, inst.h, inst.w)));
    }
    BlockSet::new(blocks)
}

fn cross_visibility(blocks: &BlockSet, tq: usize) -> Vec<Vec<bool>> {
    (0..tq)
        .map(|q| {
            blocks
                .blocks
                .iter()
                .flat_map(|b| {
                    let on = match &b.gate {
                        Gate::AllOnes => true,
                        Gate::Mask(m) => m.values().data()[q] == 1.0,
                    };
                    std::iter::repeat_n(on, b.tokens.rows())
                })
                .collect()
        })
        .collect()
}

fn self_caches(rng: &mut ChaCha8Rng, inst: &Instance) -> (Vec<FeatureCacheEntry>, Vec<SpatialMask>) {
    let tq = inst.h * inst.w;
    let room = (12 - tq) / 2;
    let n = rng.random_range(0..=room.min(2));
    let caches = (0..n)
        .map(|i| {
            let rows = rng.random_range(1..=2);
            FeatureCacheEntry {
                layer_id: LayerId(0),
                timestep_index: 1,
                features: random(rng, &[rows, inst.x.cols()], 1.5),
                owner_id: i,
            }
        })
        .collect();
    let masks = (0..n).map(|_| random_mask(rng, inst.h, inst.w)).collect();
    (caches, masks)
}

fn self_visibility(caches: &[FeatureCacheEntry], masks: &[SpatialMask], tq: usize) -> Vec<Vec<bool>> {
    (0..tq)
        .map(|q| {
            let mut row = vec![true; tq];
            for (c, m) in caches.iter().zip(masks) {
                row.extend(std::iter::repeat_n(m.values().data()[q] == 1.0, c.features.rows()));
            }
            row
        })
        .collect()
}

fn self_source(x: &RealArray, caches: &[FeatureCacheEntry]) -> RealArray {
    let mut parts = vec![x];
    parts.extend(caches.iter().map(|c| &c.features));
    RealArray::vstack(&parts).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut max_keys = 0;
    for n in 0..500 {
        let inst = instance(&mut rng);
        let tq = inst.h * inst.w;
        if n % 2 == 0 {
            let blocks = cross_blocks(&mut rng, &inst);
            max_keys = max_keys.max(blocks.token_count());
            let got = masked_cross_attention(&inst.x, &blocks, &inst.p).map_err(|e| e.to_string())?;
            let want = oracle_attention(&inst.x, &blocks.concatenated().unwrap(), &cross_visibility(&blocks, tq), &inst.p);
            worst = worst.max(max_diff(&got, &want));
        } else {
            let (caches, masks) = self_caches(&mut rng, &inst);
            let source = self_source(&inst.x, &caches);
            max_keys = max_keys.max(source.rows());
            let got = extended_self_attention(&inst.x, &caches, &masks, &inst.p).map_err(|e| e.to_string())?;
            let want = oracle_attention(&inst.x, &source, &self_visibility(&caches, &masks, tq), &inst.p);
            worst = worst.max(max_diff(&got, &want));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(max_keys <= 12, || format!("instance with {max_keys} keys"))?;
    ensure(worst <= 1e-6, || format!("max-abs error {worst:.3e} > 1e-6"))?;
    ensure(secs < 10.0, || format!("took {secs:.2}s"))?;
    Ok(format!("500 instances, max-abs error {worst:.3e}, {secs:.2}s"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut ones, mut empty, mut global) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..200 {
        let inst = instance(&mut rng);
        let d = inst.x.cols();
        let mut blocks = cross_blocks(&mut rng, &inst);
        for b in blocks.blocks.iter_mut().skip(1) {
            b.gate = Gate::Mask(SpatialMask::ones(inst.h, inst.w));
        }
        let got = masked_cross_attention(&inst.x, &blocks, &inst.p).unwrap();
        let plain = plain_attention(&inst.x, &blocks.concatenated().unwrap(), &inst.p).unwrap();
        ones = ones.max(got.max_abs_diff(&plain));

        let (caches, _) = self_caches(&mut rng, &inst);
        let all_on: Vec<SpatialMask> = caches.iter().map(|_| SpatialMask::ones(inst.h, inst.w)).collect();
        let got = extended_self_attention(&inst.x, &caches, &all_on, &inst.p).unwrap();
        let plain = plain_attention(&inst.x, &self_source(&inst.x, &caches), &inst.p).unwrap();
        ones = ones.max(got.max_abs_diff(&plain));

        let got = extended_self_attention(&inst.x, &[], &[], &inst.p).unwrap();
        let plain = plain_attention(&inst.x, &inst.x, &inst.p).unwrap();
        empty = empty.max(got.max_abs_diff(&plain));

        let n = rng.random_range(1..=4);
        let g = random(&mut rng, &[n, d], 1.5);
        let got = masked_cross_attention(&inst.x, &BlockSet::new(vec![EmbeddingBlock::global(g.clone())]), &inst.p).unwrap();
        let plain = plain_attention(&inst.x, &g, &inst.p).unwrap();
        global = global.max(got.max_abs_diff(&plain));
    }
    ensure(ones <= 1e-6, || format!("all-ones gates differ by {ones:.3e}"))?;
    ensure(empty <= 1e-9, || format!("empty caches differ by {empty:.3e}"))?;
    ensure(global <= 1e-6, || format!("global-only differs by {global:.3e}"))?;
    Ok(format!("all-ones {ones:.1e}, empty caches {empty:.1e}, global-only {global:.1e}"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    let mut triples = 0;
    while triples < 100 {
        let inst = instance(&mut rng);
        let q = rng.random_range(0..inst.h * inst.w);
        if triples % 2 == 0 {
            let blocks = cross_blocks(&mut rng, &inst);
            let Some(bi) = (1..blocks.blocks.len()).find(|&i| match &blocks.blocks[i].gate {
                Gate::Mask(m) => m.values().data()[q] == 0.0,
                _ => false,
            }) else {
                continue;
            };
            let mut perturbed = blocks.clone();
            let t = &perturbed.blocks[bi].tokens;
            perturbed.blocks[bi].tokens = random(&mut rng, t.shape(), 50.0);
            let a = masked_cross_attention(&inst.x, &blocks, &inst.p).unwrap();
            let b = masked_cross_attention(&inst.x, &perturbed, &inst.p).unwrap();
            worst = worst.max(a.row(q).iter().zip(b.row(q)).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max));
        } else {
            let (caches, masks) = self_caches(&mut rng, &inst);
            let Some(ci) = (0..caches.len()).find(|&i| masks[i].values().data()[q] == 0.0) else {
                continue;
            };
            let mut perturbed = caches.clone();
            perturbed[ci].features = random(&mut rng, caches[ci].features.shape(), 50.0);
            let a = extended_self_attention(&inst.x, &caches, &masks, &inst.p).unwrap();
            let b = extended_self_attention(&inst.x, &perturbed, &masks, &inst.p).unwrap();
            worst = worst.max(a.row(q).iter().zip(b.row(q)).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max));
        }
        triples += 1;
    }
    ensure(worst <= 1e-9, || format!("blocked tokens moved a query by {worst:.3e}"))?;
    Ok(format!("100 triples, max change {worst:.1e}"))
}

fn criterion_4() -> Outcome {
    let d = ToyDenoiser::default();
    let s = DdimSchedule::scaled_linear(10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x0 = random(&mut rng, &[4, 8, 8], 1.0);
    let cond = null_conditioning(4);
    let inv = ddim_invert(&x0, &s, &d, &cond, &InversionOptions::default()).map_err(|e| e.to_string())?;
    let sampled = ddim_sample(&inv.inverted, &s, &d, &cond, &mut PlainHooks).map_err(|e| e.to_string())?;
    let roundtrip = sampled.latent.max_abs_diff(&x0).max(inv.reconstruction.max_abs_diff(&x0));

    let mut step_err: f64 = 0.0;
    for t in 0..10 {
        let state = LatentState {
            latent: random(&mut rng, &[4, 8, 8], 2.0),
            timestep_index: t,
        };
        let eps = random(&mut rng, &[4, 8, 8], 2.0);
        let up = ddim_step(&state, &eps, &s, Direction::Invert).unwrap();
        let back = ddim_step(&up, &eps, &s, Direction::Denoise).unwrap();
        ensure(back.timestep_index == t, || "index did not return".into())?;
        step_err = step_err.max(back.latent.max_abs_diff(&state.latent));
    }
    ensure(roundtrip <= 1e-3, || format!("roundtrip error {roundtrip:.3e} > 1e-3"))?;
    ensure(step_err <= 1e-9, || format!("denoise after invert off by {step_err:.3e}"))?;
    Ok(format!("roundtrip {roundtrip:.2e}, step identity {step_err:.1e}"))
}

fn two_id_request(steps: usize) -> GenerationRequest {
    let boxes = [BBox::new(0.05, 0.1, 0.45, 0.9).unwrap(), BBox::new(0.55, 0.1, 0.95, 0.9).unwrap()];
    GenerationRequest {
        global_prompt: "two friends in a park".into(),
        ids: (0..2)
            .map(|i| IdReference {
                image: ToyInitialImageGenerator.generate(&format!("person {i}"), 10 + i as u64).unwrap(),
                local_prompt: format!("person {i} smiling"),
                bbox: boxes[i],
                identity_index: i,
            })
            .collect(),
        seed: 11,
        steps,
        guidance_scale: 1.0,
        depth_control: DepthControl::default(),
        background: None,
    }
}

fn criterion_5() -> Outcome {
    let bundle = toy_bundle();
    let pipeline = Pipeline::new(bundle.generation().unwrap(), PipelineConfig::default());
    let mut req = two_id_request(20);
    let bg_image = ToyInitialImageGenerator.generate("an empty street", 3).unwrap();
    let fg = SpatialMask::union(&[
        rasterize_mask(&req.ids[0].bbox, 8, 8).unwrap(),
        rasterize_mask(&req.ids[1].bbox, 8, 8).unwrap(),
    ])
    .unwrap();
    req.background = Some(Background {
        image: bg_image.clone(),
        foreground_mask: fg.clone(),
    });
    let x0 = ToyImageCodec.encode(&bg_image).unwrap();
    let s = DdimSchedule::scaled_linear(20).unwrap();
    let mut steps = 0;
    let mut mismatches = 0;
    let mut cells = 0;
    pipeline
        .run(&req, &mut |rec| {
            steps += 1;
            let noise = rec.noise.expect("background run reports its noise");
            let expect = forward_noise(&x0, rec.state.timestep_index, noise, &s).unwrap();
            for (i, (a, b)) in rec.state.latent.data().iter().zip(expect.data()).enumerate() {
                if fg.values().data()[i % 64] == 0.0 {
                    cells += 1;
                    if a.to_bits() != b.to_bits() {
                        mismatches += 1;
                    }
                }
            }
        })
        .map_err(|e| e.to_string())?;
    ensure(steps == 20, || format!("{steps} blended steps"))?;
    ensure(cells > 0, || "no background cells".into())?;
    ensure(mismatches == 0, || format!("{mismatches} of {cells} background cells differ"))?;
    Ok(format!("20 steps, {cells} background cells bit-identical"))
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let bundle = toy_bundle();
    let pipeline = Pipeline::new(bundle.generation().unwrap(), PipelineConfig::default());
    let req = two_id_request(10);
    let mut perturbed = req.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let noise = random(&mut rng, req.ids[0].image.shape(), 0.3);
    perturbed.ids[0].image = req.ids[0].image.zip_map(&noise, |a, n| (a + n).clamp(0.0, 1.0)).unwrap();
    let a = pipeline.run(&req, &mut |_| {}).map_err(|e| e.to_string())?;
    let b = pipeline.run(&perturbed, &mut |_| {}).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();

    let box1 = rasterize_mask(&req.ids[0].bbox, 8, 8).unwrap();
    let box2 = rasterize_mask(&req.ids[1].bbox, 8, 8).unwrap();
    let (mut outside1, mut outside_all, mut inside1) = (0.0f64, 0.0f64, 0.0f64);
    for (i, (u, v)) in a.latent.latent.data().iter().zip(b.latent.latent.data()).enumerate() {
        let q = i % 64;
        let diff = (u - v).abs();
        if box1.is_active(q) {
            inside1 = inside1.max(diff);
        } else {
            outside1 = outside1.max(diff);
            if !box2.is_active(q) {
                outside_all = outside_all.max(diff);
            }
        }
    }
    ensure(inside1 > 0.0, || "perturbation did not reach box 1".into())?;
    ensure(secs < 30.0, || format!("took {secs:.2}s"))?;
    ensure(outside1 <= 1e-6, || {
        format!(
            "latents outside box 1 moved by {outside1:.3e} (outside both boxes {outside_all:.3e}, inside box 1 {inside1:.3e}); \
             ungated image-token self-attention carries identity 1 across the grid"
        )
    })?;
    Ok(format!("outside box 1 {outside1:.1e}, {secs:.2}s"))
}

fn oracle_greedy(m: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let mut all: Vec<(f64, usize, usize)> = m
        .iter()
        .enumerate()
        .flat_map(|(i, r)| r.iter().enumerate().map(move |(j, &v)| (v, i, j)))
        .collect();
    all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut rows, mut cols, mut out) = (BTreeSet::new(), BTreeSet::new(), Vec::new());
    for (_, i, j) in all {
        if !rows.contains(&i) && !cols.contains(&j) {
            rows.insert(i);
            cols.insert(j);
            out.push((i, j));
        }
    }
    out
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in 0..1000 {
        let (r, c) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let coarse = n % 3 == 0;
        let m: Vec<Vec<f64>> = (0..r)
            .map(|_| {
                (0..c)
                    .map(|_| {
                        if coarse {
                            rng.random_range(-2..=2) as f64 / 2.0
                        } else {
                            rng.random_range(-1.0..=1.0)
                        }
                    })
                    .collect()
            })
            .collect();
        let got = greedy_match(&SimilarityMatrix::from_rows(&m).map_err(|e| e.to_string())?);
        let want = oracle_greedy(&m);
        ensure(got.pairs == want, || format!("matrix {m:?}: got {:?}, oracle {want:?}", got.pairs))?;
    }
    let doc = greedy_match(&SimilarityMatrix::from_rows(&[vec![0.9, 0.8], vec![0.85, 0.1]]).unwrap());
    let mut pairs = doc.pairs.clone();
    pairs.sort();
    ensure(pairs == vec![(0, 0), (1, 1)], || format!("documented example gave {:?}", doc.pairs))?;
    Ok("1000 random matrices agree with the oracle; documented example gives {(0,0),(1,1)}".into())
}

fn json_lines(path: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn validator_cases(dir: &Path) -> Vec<(schema::ErrorCode, String)> {
    use schema::ErrorCode as C;
    std::fs::create_dir_all(dir.join("images")).unwrap();
    std::fs::write(dir.join("images/a.png"), b"x").unwrap();
    let id = r#"{"category_label": "man", "reference_image": "images/a.png", "posture_description": "standing", "full_description": "standing, red coat", "box": {"x0": 0.1, "y0": 0.1, "x1": 0.5, "y1": 0.9}}"#;
    let sample = |sid: &str, ids: &str| {
        format!(r#"{{"sample_id": "{sid}", "global_prompt": "A portrait of 2 people, hugging", "interaction_tag": "Hugging", "ids": [{ids}]}}"#)
    };
    let ok = sample("s0", id);
    let with_id = |from: &str, to: &str| format!("[{}]", sample("s0", &id.replace(from, to)));
    vec![
        (C::Syntax, "[{\"sample_id\": }]".into()),
        (C::NotAList, "{}".into()),
        (C::NotAnObject, "[3]".into()),
        (C::UnknownKey, format!("[{}]", ok.replacen("{", "{\"extra\": 1, ", 1))),
        (C::MissingField, format!("[{}]", ok.replace(r#""interaction_tag": "Hugging", "#, ""))),
        (C::WrongType, format!("[{}]", ok.replace(r#""sample_id": "s0""#, r#""sample_id": 5"#))),
        (C::EmptySampleId, format!("[{}]", sample(" ", id))),
        (C::DuplicateSampleId, format!("[{ok}, {ok}]")),
        (C::EmptyGlobalPrompt, format!("[{}]", ok.replace("A portrait of 2 people, hugging", ""))),
        (C::EmptyInteractionTag, format!("[{}]", ok.replace("\"Hugging\"", "\"\""))),
        (C::NoIds, format!("[{}]", sample("s0", ""))),
        (C::EmptyCategory, with_id("\"man\"", "\"\"")),
        (C::EmptyPosture, with_id(r#""posture_description": "standing""#, r#""posture_description": """#)),
        (C::FullLacksPosture, with_id("standing, red coat", "sitting, red coat")),
        (C::EmptyAppearance, with_id("standing, red coat", "standing")),
        (C::InvalidBox, with_id("\"x1\": 0.5", "\"x1\": 0.05")),
        (C::EmptyReferencePath, with_id("images/a.png", "")),
        (C::MissingReference, with_id("images/a.png", "images/missing.png")),
    ]
}

fn criterion_8() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench");
    let cfg = RunConfig::default();
    let summary = bench::build(&cfg, &out).map_err(|e| e.to_string())?;
    ensure(summary.interactions == 40, || format!("{} interactions", summary.interactions))?;
    ensure(summary.prompts == 400, || format!("{} prompts", summary.prompts))?;

    let prompts: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("checkpoints/2_prompts.json")).unwrap()).unwrap();
    let items = prompts["output"].as_array().unwrap();
    let per: BTreeSet<usize> = items
        .chunk_by(|a, b| a["interaction"] == b["interaction"])
        .map(|g| g.len())
        .collect();
    ensure(items.len() == 400 && per == BTreeSet::from([10]), || format!("prompt groups {per:?}"))?;

    let t2i: Vec<String> = json_lines(&out.join("transcripts/3_templates.jsonl"))
        .iter()
        .filter(|l| l["call"]["service"] == "t2i")
        .map(|l| l["call"]["prompt"].as_str().unwrap().to_string())
        .collect();
    ensure(t2i.len() == 400, || format!("{} image generation calls", t2i.len()))?;
    ensure(t2i.iter().all(|p| p.starts_with(templates::PORTRAIT_PREFIX)), || "unprefixed generation prompt".into())?;

    let text = std::fs::read_to_string(&summary.benchmark).unwrap();
    let samples = schema::parse(&text, Some(&out)).map_err(|r| r.to_string())?;
    ensure(!samples.is_empty(), || "empty benchmark".into())?;
    ensure(
        samples.iter().all(|s| s.global_prompt.starts_with(templates::PORTRAIT_PREFIX)),
        || "unprefixed global prompt".into(),
    )?;
    ensure(schema::to_json(&samples) == text, || "serialization does not round-trip".into())?;
    let again = schema::parse(&schema::to_json(&samples), None).unwrap();
    ensure(again == samples, || "re-parsed samples differ".into())?;

    let cases = validator_cases(&tmp.path().join("cases"));
    let mut seen = BTreeSet::new();
    for (expect, doc) in &cases {
        let report = match schema::parse(doc, Some(&tmp.path().join("cases"))) {
            Ok(_) => return Err(format!("{} accepted", expect.code())),
            Err(r) => r,
        };
        ensure(report.codes() == BTreeSet::from([*expect]), || {
            format!("expected only {} for {doc}, got {:?}", expect.code(), report.codes())
        })?;
        seen.insert(expect.code());
    }
    ensure(seen.len() == cases.len(), || "codes not distinct".into())?;
    Ok(format!(
        "40 x 10 prompts, {} samples, bit-exact round trip, {} distinct validator codes",
        samples.len(),
        seen.len()
    ))
}

fn metrics(clip: f64, hps: f64, local: Option<(f64, f64, f64)>, face: (f64, usize)) -> ImageMetrics {
    ImageMetrics {
        clip_t: clip,
        hpsv2: hps,
        body: local.map(|l| l.0),
        full: local.map(|l| l.1),
        pose: local.map(|l| l.2),
        face_sum: face.0,
        face_pairs: face.1,
        matched_pairs: if local.is_some() { 2 } else { 0 },
        detections: if local.is_some() { 2 } else { 0 },
    }
}

fn criterion_9() -> Outcome {
    let close = |a: Option<f64>, b: f64| a.is_some_and(|a| (a - b).abs() <= 1e-9);

    let hand = [
        metrics(20.0, 10.0, Some((50.0, 30.0, 40.0)), (90.0, 1)),
        metrics(30.0, 20.0, None, (0.0, 0)),
        metrics(40.0, 60.0, Some((70.0, 20.0, 10.0)), (150.0, 2)),
    ];
    let r = aggregate(&hand, 3, 1).unwrap();
    let want = [30.0, 30.0, 60.0, 80.0, 25.0, 25.0];
    for (k, (got, w)) in r.columns().iter().zip(want).enumerate() {
        ensure(close(*got, w), || format!("{} = {got:?}, hand value {w}", COLUMNS[k]))?;
    }

    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig {
        steps: 3,
        ..Default::default()
    };
    cfg.bench.interactions = 2;
    cfg.bench.prompts_per_interaction = 1;
    let bench_dir = tmp.path().join("bench");
    let summary = bench::build(&cfg, &bench_dir).map_err(|e| e.to_string())?;
    let images = tmp.path().join("images");
    run::generate_benchmark(&cfg, &summary.benchmark, &images).map_err(|e| e.to_string())?;
    let bundle = toy_bundle();
    let e = eval::evaluate_benchmark(&summary.benchmark, &images, 4, &bundle, 4).map_err(|e| e.to_string())?;
    eval::write_reports(&e, &cfg.digest(), tmp.path()).map_err(|e| e.to_string())?;

    let csv = std::fs::read_to_string(tmp.path().join("report.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    ensure(header[..6] == COLUMNS, || format!("csv header {header:?}"))?;
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("report.json")).unwrap()).unwrap();
    let keys: BTreeSet<&str> = json["columns"].as_object().unwrap().keys().map(String::as_str).collect();
    ensure(keys == BTreeSet::from(COLUMNS), || format!("json columns {keys:?}"))?;
    ensure(e.report.images_per_sample == 4, || "images_per_sample".into())?;
    ensure(e.report.image_count == summary.samples * 4, || format!("{} images", e.report.image_count))?;

    let rows: Vec<&ImageMetrics> = e.rows.iter().map(|r| &r.metrics).collect();
    let avg = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let face_pairs: usize = rows.iter().map(|m| m.face_pairs).sum();
    let hand_cols = [
        Some(avg(rows.iter().map(|m| m.clip_t).collect())),
        Some(avg(rows.iter().map(|m| m.hpsv2).collect())),
        Some(avg(rows.iter().filter_map(|m| m.body).collect())),
        (face_pairs > 0).then(|| rows.iter().map(|m| m.face_sum).sum::<f64>() / face_pairs as f64),
        Some(avg(rows.iter().filter_map(|m| m.full).collect())),
        Some(avg(rows.iter().filter_map(|m| m.pose).collect())),
    ];
    for (k, (got, w)) in e.report.columns().iter().zip(hand_cols).enumerate() {
        match w {
            Some(w) => ensure(close(*got, w), || format!("{} = {got:?}, hand mean {w}", COLUMNS[k]))?,
            None => ensure(got.is_none(), || format!("{} should be empty", COLUMNS[k]))?,
        }
    }

    let one: Vec<ImageMetrics> = e.rows.iter().take(4).map(|r| r.metrics.clone()).collect();
    let base = aggregate(&one, 1, 4).unwrap();
    for k in [2usize, 5, 10] {
        let rep: Vec<ImageMetrics> = (0..k).flat_map(|_| one.clone()).collect();
        let r = aggregate(&rep, k, 4).unwrap();
        for (a, b) in r.columns().iter().zip(base.columns()) {
            let same = match (a, b) {
                (Some(a), Some(b)) => (a - b).abs() <= 1e-9,
                (None, None) => true,
                _ => false,
            };
            ensure(same, || format!("{k} copies changed a column: {a:?} vs {b:?}"))?;
        }
    }
    let shown = e.report.columns().iter().filter(|c| c.is_some()).count();
    Ok(format!("six columns ({shown} populated), {} images, idempotent, means match", e.report.image_count))
}

fn criterion_10() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for (i, name) in ["a.png", "b.png"].iter().enumerate() {
        let img = ToyInitialImageGenerator.generate(&format!("ref {i}"), i as u64).unwrap();
        imageio::save_png(&dir.join(name), &img).unwrap();
    }
    std::fs::write(
        dir.join("request.json"),
        r#"{"global_prompt": "two people shaking hands",
            "ids": [{"reference_image": "a.png", "local_prompt": "a man", "box": {"x0": 0.0, "y0": 0.0, "x1": 0.5, "y1": 1.0}},
                    {"reference_image": "b.png", "local_prompt": "a woman", "box": {"x0": 0.5, "y0": 0.0, "x1": 1.0, "y1": 1.0}}]}"#,
    )
    .unwrap();
    let request = dir.join("request.json").to_string_lossy().into_owned();
    let run_once = |out: &str| {
        let out = dir.join(out).to_string_lossy().into_owned();
        let args = [
            "multiid",
            "--seed",
            "5",
            "--steps",
            "4",
            "--images-per-sample",
            "2",
            "--out",
            out.as_str(),
            "generate",
            "--request",
            request.as_str(),
        ];
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let code = cli::run_with(args, &mut o, &mut e);
        (code, String::from_utf8_lossy(&e).into_owned())
    };
    for out in ["run1", "run2"] {
        let (code, err) = run_once(out);
        ensure(code == 0, || format!("generate exited {code}: {err}"))?;
    }
    let mut files: Vec<String> = std::fs::read_dir(dir.join("run1"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n != "timings.json")
        .collect();
    files.sort();
    ensure(files.contains(&"manifest.json".into()) && files.len() == 3, || format!("outputs {files:?}"))?;
    for f in &files {
        let a = std::fs::read(dir.join("run1").join(f)).unwrap();
        let b = std::fs::read(dir.join("run2").join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure(a == b, || format!("{f} differs between runs"))?;
    }
    Ok(format!("{} output files byte-identical", files.len()))
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("attention matches reference implementation", criterion_1),
        ("attention reductions", criterion_2),
        ("gate locality", criterion_3),
        ("inversion round trip", criterion_4),
        ("repaint keeps background", criterion_5),
        ("end-to-end locality", criterion_6),
        ("greedy matcher", criterion_7),
        ("benchmark protocol", criterion_8),
        ("report shape", criterion_9),
        ("generation determinism", criterion_10),
    ];
    let mut failed = Vec::new();
    for (i, &(name, check)) in (1..).zip(&criteria) {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("criterion {i}: PASS  {name}: {detail}"),
            Err(why) => {
                println!("criterion {i}: FAIL  {name}: {why}");
                failed.push(i);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
