//! End-to-end acceptance criteria. Each check prints one PASS/FAIL line;
//! the binary exits nonzero if any fails. Pass criterion numbers as
//! arguments to run a subset.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use ehrgen::commands::{cmd_oracle_corpus, execute};
use ehrgen::config::OraclePreset;
use ehrgen::{Command, Context, RunConfig};
use ehrgen_core::corruption::{corrupt, corrupt_traced, CorruptionConfig};
use ehrgen_core::generate::{generate_cohort, impute_next_visit, sample_next, GenerationConfig, Strategy};
use ehrgen_core::grammar::{longitudinal_answer, parse, parse_record, serialize, serialize_visits, Vocabulary, BOS, VISIT_OPEN};
use ehrgen_core::metrics::{evaluate_corpus, lpl, mpl, ppl, slot_layout, Context as SlotContext, Metric};
use ehrgen_core::model::{train, ConditionalLm, ModelConfig, NumericNorm, Side, TrainConfig, UniformLm};
use ehrgen_core::privacy::{attribute_attack_with, delta_grid, evaluate_attribute_scores, null_scores, MembershipAttackResult, RatePoint};
use ehrgen_core::records::{
    generate_oracle_corpus, BaselineFeatures, CodeId, Corpus, EventCode, ModalityId, ModalitySchema, OracleSpec, PatientRecord, Schema, Visit,
};
use ehrgen_core::tensor::Graph;
use ehrgen_core::utility::{run_utility_suite, Arm, PredictorConfig, UtilityConfig};
use ehrgen_core::{Model, Model64};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn schema(sizes: &[usize], m_c: usize, m_u: usize) -> Arc<Schema> {
    let modalities = sizes
        .iter()
        .enumerate()
        .map(|(k, &n)| ModalitySchema { name: format!("m{k}"), vocabulary: (0..n).map(|i| format!("M{k}_{i}")).collect() })
        .collect();
    Arc::new(Schema::new(modalities, m_c, m_u).unwrap())
}

/// A record with `1..=max_visits` nonempty visits and at most `max_events`
/// codes overall; codes within a block come in random order.
fn random_record(schema: &Schema, id: String, max_visits: usize, max_events: usize, r: &mut ChaCha8Rng) -> PatientRecord {
    let n_visits = r.random_range(1..=max_visits);
    let mut budget = max_events;
    let mut visits = Vec::new();
    for t in 0..n_visits {
        let reserve = n_visits - t - 1;
        let mut v = Visit::new();
        for k in schema.modality_ids() {
            let room = budget - reserve - v.num_events();
            if room == 0 || !r.random_bool(0.6) {
                continue;
            }
            let mut codes: Vec<u32> = (0..schema.vocab_size(k) as u32).collect();
            codes.shuffle(r);
            let l = r.random_range(1..=room.min(codes.len()).min(6));
            v.set(k, codes[..l].iter().map(|&c| CodeId(c)).collect());
        }
        if v.is_empty() {
            let k = ModalityId(r.random_range(0..schema.k()));
            v.set(k, vec![CodeId(r.random_range(0..schema.vocab_size(k) as u32))]);
        }
        budget -= v.num_events();
        visits.push(v);
    }
    let baseline = BaselineFeatures::new((0..schema.m_c).map(|_| r.random_range(0..2u8)).collect(), (0..schema.m_u).map(|_| r.random_range(-3.0..3.0)).collect());
    PatientRecord { id, baseline, visits }
}

fn small_model() -> ModelConfig {
    ModelConfig { d_model: 32, n_layers: 1, n_heads: 2, d_ff: 64, n_prompt_tokens: 1, d_hidden: 16 }
}

fn train_config(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig { epochs: 10, steps_per_epoch: Some(steps / 10), batch_size: 32, learning_rate: 3e-3, seed, ..TrainConfig::default() }
}

fn split(corpus: &Corpus, n_train: usize) -> (Corpus, Corpus) {
    (corpus.select(&(0..n_train).collect::<Vec<_>>()), corpus.select(&(n_train..corpus.len()).collect::<Vec<_>>()))
}

/// Demo-oracle model shared by the conditional-prompt and utility checks.
fn demo_model() -> &'static (Model, Corpus, Corpus) {
    static CELL: OnceLock<(Model, Corpus, Corpus)> = OnceLock::new();
    CELL.get_or_init(|| {
        let corpus = generate_oracle_corpus(&OracleSpec::demo(21), 1700).unwrap();
        let (tr, te) = split(&corpus, 1500);
        let model = train::<f32>(&tr, &te.select(&(0..50).collect::<Vec<_>>()), &small_model(), &train_config(1000, 21)).unwrap().model;
        (model, tr, te)
    })
}

fn chi_square_p(stat: f64, df: usize) -> f64 {
    ChiSquared::new(df as f64).unwrap().sf(stat)
}

// 1
fn grammar_round_trip() -> Result<String, String> {
    let schema = schema(&[5, 12, 30], 2, 1);
    let vocab = Vocabulary::from_schema(&schema);
    let mut r = rng(1);
    let records: Vec<PatientRecord> = (0..1000).map(|i| random_record(&schema, format!("r{i}"), 8, 40, &mut r)).collect();
    let start = Instant::now();
    let mut failures = 0;
    for rec in &records {
        let ids = serialize(&vocab, rec).map_err(|e| e.to_string())?;
        match parse_record(&vocab, ids.ids(), rec.id.clone(), rec.baseline.clone()) {
            Ok(back) if &back == rec => {}
            _ => failures += 1,
        }
    }
    let took = start.elapsed();
    ensure(failures == 0, format!("{failures} of 1000 records did not round-trip"))?;
    ensure(took < Duration::from_secs(5), format!("took {took:?}"))?;
    Ok(format!("1000 records, 0 failures in {:.3}s", took.as_secs_f64()))
}

// 2
fn cardinality_calibration() -> Result<String, String> {
    let mut worst: f64 = 0.0;
    for size in [10usize, 185, 1071] {
        let schema = schema(&[size, 7], 0, 0);
        let vocab = Arc::new(Vocabulary::from_schema(&schema));
        let mut r = rng(size as u64);
        let records: Vec<PatientRecord> = (0..20)
            .map(|i| {
                let mut rec = random_record(&schema, format!("r{i}"), 4, 30, &mut r);
                rec.visits[0].set(ModalityId(0), vec![CodeId(0), CodeId(size as u32 - 1)]);
                rec.visits[0].set(ModalityId(1), vec![CodeId(3)]);
                rec
            })
            .collect();
        for k in schema.modality_ids() {
            let n = schema.vocab_size(k) as f64;
            let range: Vec<_> = vocab.code_range(k).collect();
            let stub = UniformLm::over(vocab.clone(), &range);
            for rec in &records {
                for (t, v) in rec.visits.iter().enumerate().filter(|(_, v)| v.has(k)) {
                    let layout = slot_layout(&vocab, rec, t, k, SlotContext::Longitudinal).map_err(|e| e.to_string())?;
                    let target: Vec<_> = v.codes(k).iter().map(|&code| vocab.code_token(EventCode { modality: k, code }).unwrap()).collect();
                    worst = worst.max(rel_err(ppl(&stub, &layout, rec, &target).map_err(|e| e.to_string())?, n, 0.0));
                }
                worst = worst.max(rel_err(lpl(&stub, rec, k).map_err(|e| e.to_string())?, n, 0.0));
                worst = worst.max(rel_err(mpl(&stub, rec, k).map_err(|e| e.to_string())?, n, 0.0));
            }
        }
    }
    ensure(worst <= 1e-6, format!("max relative error {worst:e}"))?;
    Ok(format!("|C| in {{10, 185, 1071}}, max relative error {worst:.1e}"))
}

/// Teacher-forced NLL of `codes` recomputed from scratch for every prefix,
/// renormalized over the modality's codes.
fn brute_force_nll(model: &Model64, rec: &PatientRecord, t: usize, k: ModalityId, context: SlotContext) -> f64 {
    let vocab = model.vocab().clone();
    let layout = slot_layout(&vocab, rec, t, k, context).unwrap();
    let enc = model.embed_inputs(layout.encoder.ids(), &rec.baseline, Side::Encoder).unwrap();
    let mut decoder = layout.decoder_prefix.ids().to_vec();
    let mut nll = 0.0;
    for &code in rec.visits[t].codes(k) {
        let dec = model.embed_inputs(&decoder, &rec.baseline, Side::Decoder).unwrap();
        let probs = model.forward(&enc, &dec).unwrap();
        let row = probs.row(probs.rows() - 1);
        let token = vocab.code_token(EventCode { modality: k, code }).unwrap();
        let mass: f64 = vocab.code_range(k).map(|c| row[c as usize]).sum();
        nll -= (row[token as usize] / mass).ln();
        decoder.push(token);
    }
    nll
}

// 3
fn metric_oracle_equivalence() -> Result<String, String> {
    let start = Instant::now();
    let schema = schema(&[6, 5, 4], 1, 1);
    let model = Model64::new(small_model(), schema.clone(), NumericNorm::identity(1), 3).map_err(|e| e.to_string())?;
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for i in 0..50 {
        let rec = random_record(&schema, format!("r{i}"), 3, 4, &mut r);
        for k in schema.modality_ids() {
            let slots: Vec<usize> = (0..rec.visits.len()).filter(|&t| rec.visits[t].has(k)).collect();
            if slots.is_empty() {
                continue;
            }
            let mut long = (0.0, 0usize);
            let mut cross = Vec::new();
            for &t in &slots {
                let l = rec.visits[t].codes(k).len();
                long.0 += brute_force_nll(&model, &rec, t, k, SlotContext::Longitudinal);
                long.1 += l;
                cross.push(brute_force_nll(&model, &rec, t, k, SlotContext::CrossModal) / l as f64);
            }
            let want_lpl = (long.0 / long.1 as f64).exp();
            let want_mpl = (cross.iter().sum::<f64>() / cross.len() as f64).exp();
            worst = worst.max(rel_err(lpl(&model, &rec, k).map_err(|e| e.to_string())?, want_lpl, 0.0));
            worst = worst.max(rel_err(mpl(&model, &rec, k).map_err(|e| e.to_string())?, want_mpl, 0.0));
            compared += 2;
        }
    }
    let took = start.elapsed();
    ensure(worst <= 1e-9, format!("max relative error {worst:e}"))?;
    ensure(took < Duration::from_secs(30), format!("took {took:?}"))?;
    Ok(format!("{compared} lpl/mpl values, max relative error {worst:.1e} in {:.1}s", took.as_secs_f64()))
}

// 4
fn gradient_check() -> Result<String, String> {
    let corpus = generate_oracle_corpus(&OracleSpec::demo(4), 5).unwrap();
    let mc = ModelConfig { d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, n_prompt_tokens: 2, d_hidden: 4 };
    let mut model = Model64::new(mc, corpus.schema_arc().clone(), NumericNorm::from_corpus(&corpus), 4).map_err(|e| e.to_string())?;
    let mut r = rng(4);
    // Zero-initialized biases would leave every hidden unit on the same side of its kink.
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        if model.params().name(id).contains("prompt_") {
            for x in model.params_mut().get_mut(id).data_mut() {
                *x += r.random_range(-0.3..0.3);
            }
        }
    }
    let rec = &corpus.records()[0];
    let vocab = model.vocab().clone();
    let encoder = serialize_visits(&vocab, &rec.visits[..1]).map_err(|e| e.to_string())?.into_ids();
    let answer = longitudinal_answer(&vocab, &rec.visits[1.min(rec.visits.len() - 1)], false).map_err(|e| e.to_string())?;
    let mut decoder = vec![BOS, VISIT_OPEN];
    decoder.extend_from_slice(&answer[..answer.len() - 1]);
    let targets: Vec<Option<usize>> = std::iter::once(None).chain(answer.iter().map(|&t| Some(t as usize))).collect();
    let loss_of = |m: &Model64| {
        let mut g = Graph::new(m.params());
        let l = m.g_loss(&mut g, &encoder, &decoder, &targets, &rec.baseline).unwrap();
        g.value(l)[(0, 0)]
    };
    let grads = {
        let mut g = Graph::new(model.params());
        let l = model.g_loss(&mut g, &encoder, &decoder, &targets, &rec.baseline).unwrap();
        g.backward(l)
    };
    let mut coords = Vec::new();
    for id in model.params().ids() {
        let name = model.params().name(id).to_string();
        let n = model.params().get(id).len();
        if name.contains("prompt_") {
            coords.extend((0..n).map(|i| (id, i)));
        } else if name == "tok_emb" {
            let d = model.params().get(id).cols();
            let used: Vec<usize> = encoder.iter().chain(&decoder).map(|&t| t as usize).collect();
            coords.extend((0..60).map(|_| {
                let row = used[r.random_range(0..used.len())];
                (id, row * d + r.random_range(0..d))
            }));
        }
    }
    coords.sort_by_key(|&(id, i)| (id.index(), i));
    coords.dedup();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for &(id, i) in &coords {
        let orig = model.params().get(id).data()[i];
        model.params_mut().get_mut(id).data_mut()[i] = orig + h;
        let plus = loss_of(&model);
        model.params_mut().get_mut(id).data_mut()[i] = orig - h;
        let minus = loss_of(&model);
        model.params_mut().get_mut(id).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
        worst = worst.max(rel_err(analytic, numeric, 1e-6));
    }
    ensure(coords.len() >= 100, format!("only {} coordinates", coords.len()))?;
    ensure(worst <= 1e-4, format!("max relative error {worst:e}"))?;
    Ok(format!("{} coordinates, max relative error {worst:.1e}", coords.len()))
}

// 5
fn learning_signal() -> Result<String, String> {
    let spec = OracleSpec::deterministic_chain(50, 5);
    let corpus = generate_oracle_corpus(&spec, 300).unwrap();
    let (tr, held) = split(&corpus, 200);
    let start = Instant::now();
    let model: Model = train::<f32>(&tr, &held.select(&[0, 1, 2, 3, 4]), &small_model(), &train_config(CHAIN_STEPS, 5)).map_err(|e| e.to_string())?.model;
    let took = start.elapsed();
    let greedy = GenerationConfig { strategy: Strategy::Greedy, ..GenerationConfig::default() };
    let (mut hits, mut total) = (0, 0);
    for rec in held.records() {
        for t in 1..rec.visits.len() {
            let want = OracleSpec::primary_code(&rec.visits[t - 1]).and_then(|c| spec.deterministic_successor(c));
            let got = impute_next_visit(&model, &rec.visits[..t], &rec.baseline, &greedy, &mut rng(0)).map_err(|e| e.to_string())?;
            hits += usize::from(OracleSpec::primary_code(&got.visit) == want && want.is_some());
            total += 1;
        }
    }
    let acc = hits as f64 / total as f64;
    ensure(acc >= 0.95, format!("{hits}/{total} = {acc:.3} held-out transitions"))?;
    ensure(took < Duration::from_secs(600), format!("training took {took:?}"))?;
    Ok(format!("{hits}/{total} = {acc:.3} held-out transitions, trained in {:.0}s", took.as_secs_f64()))
}

const CHAIN_STEPS: usize = 3000;

// 6
fn cross_modal_advantage() -> Result<String, String> {
    let corpus = generate_oracle_corpus(&OracleSpec::coupled(8, 4, 0.9, 6), 1400).unwrap();
    let (tr, te) = split(&corpus, 1200);
    let model: Model = train::<f32>(&tr, &te.select(&(0..20).collect::<Vec<_>>()), &small_model(), &train_config(1000, 6)).map_err(|e| e.to_string())?.model;
    let report = evaluate_corpus(&model, &te, 6).map_err(|e| e.to_string())?;
    let l = report.get("lab", Metric::Lpl).ok_or("no lab lpl")?;
    let m = report.get("lab", Metric::Mpl).ok_or("no lab mpl")?;
    let detail = format!("lab lpl {:.3} ± {:.3}, mpl {:.3} ± {:.3}", l.median, l.ci95, m.median, m.ci95);
    ensure(m.median < l.median && l.median - m.median > l.ci95 + m.ci95, detail.clone())?;
    Ok(detail)
}

fn first_dx_table(model: &Model, flag: u8, seed: u64) -> Vec<u64> {
    let baselines = vec![BaselineFeatures::new(vec![flag, 0], vec![60.0]); 1000];
    let cfg = GenerationConfig { max_visits: 1, seed, ..GenerationConfig::unfiltered() };
    let mut counts = vec![0u64; model.schema().vocab_size(ModalityId(0))];
    for g in generate_cohort(model, &baselines, "g", &cfg).unwrap() {
        if let Some(c) = g.record.visits[0].codes(ModalityId(0)).first() {
            counts[c.0 as usize] += 1;
        }
    }
    counts
}

// 7
fn conditional_prompt_effect() -> Result<String, String> {
    let (model, _, _) = demo_model();
    let (a, b) = (first_dx_table(model, 0, 7), first_dx_table(model, 1, 7));
    let keep: Vec<usize> = (0..a.len()).filter(|&j| a[j] + b[j] > 0).collect();
    let (na, nb) = (a.iter().sum::<u64>() as f64, b.iter().sum::<u64>() as f64);
    let mut stat = 0.0;
    for &j in &keep {
        let col = (a[j] + b[j]) as f64;
        for (obs, n) in [(a[j], na), (b[j], nb)] {
            let e = n * col / (na + nb);
            stat += (obs as f64 - e).powi(2) / e;
        }
    }
    let p = chi_square_p(stat, keep.len() - 1);
    ensure(p < 0.01, format!("chi-square p = {p:e}"))?;

    let mut zeroed = model.clone();
    zeroed.zero_featurizers();
    let cfg = GenerationConfig { max_visits: 4, seed: 77, ..GenerationConfig::unfiltered() };
    let lo = vec![BaselineFeatures::new(vec![0, 0], vec![20.0]); 50];
    let hi = vec![BaselineFeatures::new(vec![1, 1], vec![90.0]); 50];
    let ga = generate_cohort(&zeroed, &lo, "g", &cfg).map_err(|e| e.to_string())?;
    let gb = generate_cohort(&zeroed, &hi, "g", &cfg).map_err(|e| e.to_string())?;
    ensure(ga.iter().zip(&gb).all(|(x, y)| x.record.visits == y.record.visits), "zeroed featurizers: generated visits differ")?;
    let (_, tr, _) = demo_model();
    for rec in &tr.records()[..20] {
        let enc = serialize_visits(zeroed.vocab(), &rec.visits[..1]).unwrap();
        let dec = serialize_visits(zeroed.vocab(), &rec.visits[1.min(rec.visits.len() - 1)..]).unwrap();
        let x = zeroed.next_logprobs(&zeroed.encode(enc.ids(), &lo[0]).unwrap(), dec.ids()).unwrap();
        let y = zeroed.next_logprobs(&zeroed.encode(enc.ids(), &hi[0]).unwrap(), dec.ids()).unwrap();
        ensure(x == y, "zeroed featurizers: log-probabilities differ")?;
    }
    Ok(format!("first-visit dx chi-square p = {p:.1e}; zeroed featurizers identical"))
}

// 8
fn sampling_arithmetic() -> Result<String, String> {
    let topk = GenerationConfig { strategy: Strategy::TopK, top_k: 2, temperature: 1.0, ..GenerationConfig::default() };
    let mut r = rng(8);
    let mut counts = [0usize; 3];
    for _ in 0..100_000 {
        counts[sample_next(&[0.5, 0.3, 0.2], &topk, &mut r).map_err(|e| e.to_string())?] += 1;
    }
    let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / 100_000.0).collect();
    let worst = [0.625, 0.375, 0.0].iter().zip(&freq).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(worst <= 0.01, format!("top-2 frequencies {freq:?}"))?;

    let top1 = GenerationConfig { top_k: 1, ..topk.clone() };
    let greedy = GenerationConfig { strategy: Strategy::Greedy, ..GenerationConfig::default() };
    for _ in 0..1000 {
        let w: Vec<f64> = (0..12).map(|_| r.random::<f64>()).collect();
        let s: f64 = w.iter().sum();
        let dist: Vec<f64> = w.iter().map(|x| x / s).collect();
        let a = sample_next(&dist, &top1, &mut r).unwrap();
        let b = sample_next(&dist, &greedy, &mut r).unwrap();
        ensure(a == b, format!("top-1 drew {a}, greedy {b}"))?;
    }

    let nucleus = GenerationConfig { strategy: Strategy::Nucleus, top_p: 1.0, temperature: 1.0, ..GenerationConfig::default() };
    let w: Vec<f64> = (1..=10).map(|i| (i * i) as f64).collect();
    let s: f64 = w.iter().sum();
    let dist: Vec<f64> = w.iter().map(|x| x / s).collect();
    let plain = WeightedIndex::new(&dist).unwrap();
    let n = 20_000;
    let a: Vec<usize> = (0..n).map(|_| sample_next(&dist, &nucleus, &mut r).unwrap()).collect();
    let mut r2 = rng(80);
    let b: Vec<usize> = (0..n).map(|_| plain.sample(&mut r2)).collect();
    // Two-sample KS on the empirical CDFs; p > 0.01 iff D is below the critical value.
    let cdf = |xs: &[usize], v: usize| xs.iter().filter(|&&x| x <= v).count() as f64 / xs.len() as f64;
    let d = (0..10).map(|v| (cdf(&a, v) - cdf(&b, v)).abs()).fold(0.0, f64::max);
    let critical = (-(0.005f64).ln() / 2.0).sqrt() * (2.0 / n as f64).sqrt();
    ensure(d < critical, format!("KS D = {d:.4} >= {critical:.4}"))?;
    Ok(format!("top-2 max deviation {worst:.4}; top-1 = greedy on 1000 draws; nucleus p=1 KS D = {d:.4} < {critical:.4}"))
}

fn pair_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

// 9
fn mi_harness_validity() -> Result<String, String> {
    let ids = |n: usize| (0..n).map(|i| format!("p{i}")).collect::<Vec<_>>();
    let labels: Vec<bool> = (0..200).map(|i| i % 3 == 0).collect();
    let mut r = rng(9);
    let scores: Vec<f64> = labels.iter().map(|&l| if l { 1.0 + r.random::<f64>() } else { r.random::<f64>() }).collect();
    let sep = MembershipAttackResult::from_scores(ids(200), scores, labels).map_err(|e| e.to_string())?;
    ensure(sep.auc == 1.0, format!("separable AUC {}", sep.auc))?;

    let (scores, labels) = null_scores(1000, &mut r);
    let null = MembershipAttackResult::from_scores(ids(1000), scores, labels).map_err(|e| e.to_string())?;
    ensure((0.45..=0.55).contains(&null.auc), format!("null AUC {}", null.auc))?;

    let mut worst: f64 = 0.0;
    for trial in 0..200 {
        let n = r.random_range(2..=100);
        let mut labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        // Coarse scores so that ties occur.
        let scores: Vec<f64> = (0..n).map(|_| (r.random_range(0..10) as f64) / 4.0).collect();
        let res = MembershipAttackResult::from_scores(ids(n), scores.clone(), labels.clone()).map_err(|e| format!("trial {trial}: {e}"))?;
        worst = worst.max((res.auc - pair_auc(&scores, &labels)).abs());
    }
    ensure(worst <= 1e-9, format!("AUC differs from pair count by {worst:e}"))?;
    Ok(format!("separable AUC 1, null AUC {:.3}, pair-count oracle max error {worst:.1e}", null.auc))
}

fn check_sweep(points: &[RatePoint]) -> Result<(), String> {
    ensure(points.windows(2).all(|w| w[1].tpr <= w[0].tpr && w[1].fpr <= w[0].fpr), "rates increase along the grid")?;
    let (first, last) = (points[0], points[points.len() - 1]);
    ensure((first.tpr, first.fpr) == (1.0, 1.0), format!("-inf endpoint ({}, {})", first.tpr, first.fpr))?;
    ensure((last.tpr, last.fpr) == (0.0, 0.0), format!("+inf endpoint ({}, {})", last.tpr, last.fpr))
}

// 10
fn ai_attack_sweep() -> Result<String, String> {
    let grid = delta_grid(-5.0, 5.0, 0.5);
    let mut r = rng(10);
    for _ in 0..500 {
        let pos: Vec<f64> = (0..r.random_range(1..50)).map(|_| r.random_range(-6.0..6.0)).collect();
        let neg: Vec<f64> = (0..r.random_range(1..50)).map(|_| r.random_range(-6.0..6.0f64).round()).collect();
        check_sweep(&evaluate_attribute_scores(&pos, &neg, &grid).map_err(|e| e.to_string())?)?;
    }
    let corpus = generate_oracle_corpus(&OracleSpec::demo(10), 40).unwrap();
    let mc = ModelConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, n_prompt_tokens: 1, d_hidden: 8 };
    let model = Model::new(mc, corpus.schema_arc().clone(), NumericNorm::from_corpus(&corpus), 10).map_err(|e| e.to_string())?;
    let res = attribute_attack_with(&model, &model, &model, &corpus, &grid, 0.2, 10).map_err(|e| e.to_string())?;
    check_sweep(&res.treatment)?;
    check_sweep(&res.control)?;
    let gap = res.treatment.iter().map(|p| (p.tpr - p.fpr).abs()).fold(0.0, f64::max);
    ensure(gap < 0.05, format!("self-attack |TPR - FPR| reaches {gap}"))?;
    Ok(format!("500 random sweeps monotone with exact endpoints; self-attack max |TPR - FPR| = {gap} over {} hidden codes", res.n_hidden))
}

fn visit_multisets(visits: &[Visit]) -> Vec<BTreeMap<usize, Vec<u32>>> {
    visits
        .iter()
        .map(|v| {
            v.iter()
                .map(|(k, codes)| {
                    let mut c: Vec<u32> = codes.iter().map(|c| c.0).collect();
                    c.sort_unstable();
                    (k.0, c)
                })
                .collect()
        })
        .collect()
}

// 11
fn corruption_distribution() -> Result<String, String> {
    let schema = schema(&[120], 0, 0);
    let vocab = Vocabulary::from_schema(&schema);
    let seq = serialize_visits(&vocab, &[Visit::new().with(ModalityId(0), (0..100).map(CodeId).collect())]).unwrap();
    let cfg = CorruptionConfig { p_infill: 1.0, infill_lambda: 3.0, ..CorruptionConfig::identity() };
    let mut r = rng(11);
    let mut counts = vec![0u64; 101];
    for _ in 0..10_000 {
        let (_, trace) = corrupt_traced(&vocab, &seq, &cfg, &mut r);
        counts[*trace.infill_lengths.first().ok_or("no infill recorded")?] += 1;
    }
    // Poisson(3) cells 0..=9 plus a pooled tail.
    let mut pmf = vec![(-3.0f64).exp()];
    for k in 1..10 {
        pmf.push(pmf[k - 1] * 3.0 / k as f64);
    }
    let tail = 1.0 - pmf.iter().sum::<f64>();
    let mut observed: Vec<u64> = counts[..10].to_vec();
    observed.push(counts[10..].iter().sum());
    pmf.push(tail);
    let stat: f64 = observed.iter().zip(&pmf).map(|(&o, &p)| (o as f64 - 10_000.0 * p).powi(2) / (10_000.0 * p)).sum();
    let p = chi_square_p(stat, pmf.len() - 1);
    ensure(p > 0.01, format!("infill lengths vs Poisson(3): chi-square p = {p:e}"))?;

    let corpus = generate_oracle_corpus(&OracleSpec::demo(11), 1000).unwrap();
    let vocab = Vocabulary::from_schema(corpus.schema());
    let shuffle = CorruptionConfig { enable_span_shuffle: true, enable_modality_permute: true, ..CorruptionConfig::identity() };
    let mut violations = 0;
    for rec in corpus.records() {
        let seq = serialize_visits(&vocab, &rec.visits).unwrap();
        let out = corrupt(&vocab, &seq, &shuffle, &mut r);
        let back = parse(&vocab, out.ids()).map_err(|e| e.to_string())?;
        violations += usize::from(visit_multisets(&back) != visit_multisets(&rec.visits));
    }
    ensure(violations == 0, format!("{violations} of 1000 shuffle/permute trials changed a visit multiset"))?;
    Ok(format!("infill lengths chi-square p = {p:.3}; 0 multiset violations in 1000 trials"))
}

// 12
fn utility_direction() -> Result<String, String> {
    let (model, tr, te) = demo_model();
    let n_real = 40;
    let arms: Vec<Arm> = [0, 100, 300, 600, 1000].iter().map(|&n_syn| Arm { n_syn, n_real }).collect();
    let cfg = UtilityConfig {
        predictor: PredictorConfig { seed: 12, ..PredictorConfig::default() },
        generation: GenerationConfig { max_visits: 8, ..GenerationConfig::unfiltered() },
        ks: vec![10],
        bootstrap_resamples: 200,
        seed: 12,
    };
    let start = Instant::now();
    let results = run_utility_suite(model, tr, te, &arms, &cfg).map_err(|e| e.to_string())?;
    let per_arm = start.elapsed() / arms.len() as u32;
    let recalls: Vec<f64> = results.iter().map(|r| r.recall[0].recall).collect();
    let x: Vec<f64> = arms.iter().map(|a| a.n_syn as f64).collect();
    let rho = spearman_oracle(&x, &recalls);
    let detail = format!("recall@10 {:?} over syn {:?}, Spearman {rho:.2}, {:.0}s per arm", recalls.iter().map(|r| (r * 1000.0).round() / 1000.0).collect::<Vec<_>>(), x, per_arm.as_secs_f64());
    ensure(rho > 0.0, detail.clone())?;
    ensure(per_arm < Duration::from_secs(300), detail.clone())?;
    Ok(detail)
}

/// Pearson correlation of average ranks.
fn spearman_oracle(x: &[f64], y: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter().map(|a| v.iter().filter(|b| *b < a).count() as f64 + (v.iter().filter(|b| *b == a).count() as f64 + 1.0) / 2.0).collect()
    };
    let (rx, ry) = (rank(x), rank(y));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mx, my) = (mean(&rx), mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        let bytes = std::fs::read(&path).unwrap();
        if name.starts_with("manifest_") {
            let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
            v.as_object_mut().unwrap().remove("created_unix");
            out.insert(name, serde_json::to_vec(&v).unwrap());
        } else {
            out.insert(name, bytes);
        }
    }
    out
}

// 13
fn determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = RunConfig { seed: 13, out: Some(dir.path().to_path_buf()), model: small_model(), ..RunConfig::default() };
    cfg.oracle.preset = OraclePreset::Demo;
    cfg.oracle.n = 80;
    cmd_oracle_corpus(&Context::new(cfg.clone(), None, None, None, None).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    cfg.data.schema = Some(dir.path().join("schema.json"));
    cfg.data.train = Some(dir.path().join("train.jsonl"));
    cfg.data.val = Some(dir.path().join("val.jsonl"));
    cfg.data.test = Some(dir.path().join("test.jsonl"));
    cfg.train = TrainConfig { epochs: 2, batch_size: 16, learning_rate: 3e-3, ..TrainConfig::default() };
    cfg.generation = GenerationConfig { max_visits: 6, ..GenerationConfig::default() };
    let ctx = Context::new(cfg, None, None, None, Some(20)).map_err(|e| e.to_string())?;
    let run = || -> Result<BTreeMap<String, Vec<u8>>, String> {
        for cmd in [Command::Train, Command::Generate { mode: None }, Command::Evaluate] {
            execute(&ctx, cmd).map_err(|e| format!("{}: {e}", cmd.name()))?;
        }
        Ok(snapshot(dir.path()))
    };
    let first = run()?;
    let second = run()?;
    let differing: Vec<&String> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();
    ensure(first.keys().eq(second.keys()) && differing.is_empty(), format!("files differ: {differing:?}"))?;
    Ok(format!("{} files byte-identical across two runs (manifest timestamps excluded)", first.len()))
}

const CRITERIA: [(&str, Check); 13] = [
    ("grammar round-trip", grammar_round_trip),
    ("cardinality calibration", cardinality_calibration),
    ("metric oracle equivalence", metric_oracle_equivalence),
    ("gradient check", gradient_check),
    ("learning signal", learning_signal),
    ("cross-modal advantage", cross_modal_advantage),
    ("conditional-prompt effect", conditional_prompt_effect),
    ("sampling arithmetic", sampling_arithmetic),
    ("MI harness validity", mi_harness_validity),
    ("AI attack sweep", ai_attack_sweep),
    ("corruption distribution", corruption_distribution),
    ("utility direction", utility_direction),
    ("determinism", determinism),
];

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in CRITERIA.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {n:>2} {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
