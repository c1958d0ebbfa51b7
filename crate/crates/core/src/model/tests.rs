use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corruption::CorruptionConfig;
use crate::grammar::{build_longitudinal_prompt, longitudinal_answer, serialize_visits, BOS, VISIT_OPEN};
use crate::records::fixtures::{record, small_schema, visit};
use crate::records::{generate_oracle_corpus, Corpus, ModalityId, ModalitySchema, OracleSpec};

fn tiny_config() -> ModelConfig {
    ModelConfig { d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, n_prompt_tokens: 1, d_hidden: 4 }
}

fn tiny<T: Scalar>(seed: u64) -> ModelParams<T> {
    ModelParams::new(tiny_config(), small_schema(), NumericNorm::identity(1), seed).unwrap()
}

fn set(model: &mut ModelParams<f64>, name: &str, value: Matrix<f64>) {
    let id = model.params().find(name).unwrap();
    *model.params_mut().get_mut(id) = value;
}

fn randomize_biases(model: &mut ModelParams<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let name = model.params().name(id).to_string();
        if name.ends_with(".b") || name.ends_with(".bq") || name.ends_with(".b1") || name == "out_bias" {
            for x in model.params_mut().get_mut(id).data_mut() {
                *x = rng.random_range(-0.5..0.5);
            }
        }
    }
}

fn baseline(c: u8, x: f64) -> BaselineFeatures {
    BaselineFeatures::new(vec![c], vec![x])
}

#[test]
fn zero_features_and_bias_give_zero_prompt() {
    let mut m = tiny::<f64>(1);
    set(&mut m, "enc.prompt_cat.b", Matrix::zeros(1, 4));
    let f = m.featurizer(Side::Encoder, false).unwrap();
    let e = f.embed(&[0.0], 1).unwrap();
    assert!(e.data().iter().all(|&x| x == 0.0));
}

#[test]
fn identity_featurizer_composition() {
    let schema = Arc::new(Schema::new(vec![ModalitySchema { name: "dx".into(), vocabulary: vec!["D1".into()] }], 2, 0).unwrap());
    let cfg = ModelConfig { d_model: 2, n_layers: 1, n_heads: 1, d_ff: 2, n_prompt_tokens: 1, d_hidden: 2 };
    let mut m = ModelParams::<f64>::new(cfg, schema, NumericNorm::identity(0), 0).unwrap();
    set(&mut m, "enc.prompt_cat.w0", Matrix::identity(2));
    set(&mut m, "enc.prompt_cat.b", Matrix::zeros(1, 2));
    set(&mut m, "enc.prompt_cat.w1", Matrix::identity(2));
    let e = m.featurize_prompt(&BaselineFeatures::new(vec![1, 0], vec![]), Side::Encoder).unwrap();
    assert_eq!(e.data(), &[1.0, 0.0]);
}

#[test]
fn featurizer_matches_loop_oracle() {
    let cfg = ModelConfig { d_model: 6, n_heads: 2, n_prompt_tokens: 2, d_hidden: 5, ..tiny_config() };
    let schema = Arc::new(Schema::new(small_schema().modalities.clone(), 4, 0).unwrap());
    let mut m = ModelParams::<f64>::new(cfg, schema, NumericNorm::identity(0), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    randomize_biases(&mut m, &mut rng);
    let x = [1.0, 0.0, 1.0, 1.0];
    let f = m.featurizer(Side::Decoder, false).unwrap();
    let got = f.embed(&x, 2).unwrap();
    assert_eq!(got.shape(), (2, 6));
    for r in 0..2 {
        for c in 0..6 {
            let mut expected = 0.0;
            for j in 0..5 {
                let mut h = f.b[(0, j)];
                for (i, xi) in x.iter().enumerate() {
                    h += xi * f.w0[(i, j)];
                }
                expected += h * f.w1[(j, r * 6 + c)];
            }
            let g = got[(r, c)];
            assert!((g - expected).abs() <= 1e-6 * expected.abs().max(1e-12), "{g} vs {expected}");
        }
    }
}

#[test]
fn embed_inputs_layout() {
    let mut m = tiny::<f64>(2);
    for name in ["enc.prompt_cat.b", "enc.prompt_num.b"] {
        set(&mut m, name, Matrix::zeros(1, 4));
    }
    let v = m.vocab().clone();
    let tokens = v.encode_str("<s> <v> <dx> dx:D1 </dx> </v> </s>").unwrap();
    let e = m.embed_inputs(&tokens, &baseline(0, 0.0), Side::Encoder).unwrap();
    let p = m.prompt_rows();
    assert_eq!(p, 2);
    assert_eq!(e.rows(), p + tokens.len());
    assert!(e.data()[..p * 8].iter().all(|&x| x == 0.0));
    let table = m.params().get(m.params().find("tok_emb").unwrap());
    for (pos, &t) in tokens.iter().enumerate() {
        for i in 0..8 {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / 8.0);
            let pe = if i % 2 == 0 { (pos as f64 * rate).sin() } else { (pos as f64 * rate).cos() };
            assert_eq!(e[(p + pos, i)], table[(t as usize, i)] + pe);
        }
    }
    let other = m.embed_inputs(&tokens, &baseline(1, 3.0), Side::Encoder).unwrap();
    assert_eq!(&e.data()[p * 8..], &other.data()[p * 8..]);
    assert_ne!(&e.data()[..p * 8], &other.data()[..p * 8]);
}

#[test]
fn dimension_mismatch_is_reported() {
    let m = tiny::<f64>(2);
    let bad = BaselineFeatures::new(vec![1, 0], vec![0.0]);
    assert!(matches!(m.featurize_prompt(&bad, Side::Encoder), Err(ModelError::DimensionMismatch(_))));
}

fn example_inputs(m: &ModelParams<f64>) -> (Matrix<f64>, Vec<TokenId>, BaselineFeatures) {
    let v = m.vocab();
    let enc = v.encode_str("<s> <v> <dx> dx:D1 dx:D3 </dx> <lab> lab:L2 </lab> </v> </s>").unwrap();
    let b = baseline(1, 0.7);
    let dec = v.encode_str("<s> <v> <dx> dx:D2 </dx> <med> med:M1 </med> </v>").unwrap();
    (m.embed_inputs(&enc, &b, Side::Encoder).unwrap(), dec, b)
}

#[test]
fn forward_rows_are_distributions_and_causal() {
    let m = tiny::<f64>(4);
    let (enc, dec, b) = example_inputs(&m);
    let probs = m.forward(&enc, &m.embed_inputs(&dec, &b, Side::Decoder).unwrap()).unwrap();
    assert_eq!(probs.shape(), (dec.len(), m.vocab().len()));
    for i in 0..probs.rows() {
        assert!((probs.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    for j in 0..dec.len() {
        let mut changed = dec.clone();
        changed[j] = if changed[j] == 9 { 10 } else { 9 };
        let p2 = m.forward(&enc, &m.embed_inputs(&changed, &b, Side::Decoder).unwrap()).unwrap();
        for i in 0..j {
            assert_eq!(probs.row(i), p2.row(i), "row {i} changed after editing {j}");
        }
        assert_ne!(probs.row(j), p2.row(j));
    }
}

#[test]
fn loss_matches_cross_entropy_of_distributions() {
    let m = tiny::<f64>(5);
    let (enc_emb, dec, b) = example_inputs(&m);
    let v = m.vocab();
    let enc = v.encode_str("<s> <v> <dx> dx:D1 dx:D3 </dx> <lab> lab:L2 </lab> </v> </s>").unwrap();
    let targets: Vec<Option<usize>> = dec[1..].iter().map(|&t| Some(t as usize)).chain([Some(EOS_ID)]).collect();
    let mut g = Graph::new(m.params());
    let loss = m.g_loss(&mut g, &enc, &dec, &targets, &b).unwrap();
    let probs = m.forward(&enc_emb, &m.embed_inputs(&dec, &b, Side::Decoder).unwrap()).unwrap();
    let oracle: f64 = targets.iter().enumerate().map(|(i, t)| -probs[(i, t.unwrap())].ln()).sum();
    assert!((g.value(loss)[(0, 0)] - oracle).abs() <= 1e-6 * oracle);
}

const EOS_ID: usize = crate::grammar::EOS as usize;

#[test]
fn token_logprobs_contracts() {
    let m = tiny::<f64>(6);
    let v = m.vocab().clone();
    let layout = build_longitudinal_prompt(&v, &[visit(&[(0, &[0])])]).unwrap();
    let b = baseline(0, 1.0);
    let target = longitudinal_answer(&v, &visit(&[(0, &[1]), (2, &[2])]), false).unwrap();
    let lp = token_logprobs(&m, &layout, &b, &target).unwrap();
    assert_eq!(lp.len(), target.len());
    assert!(lp.iter().all(|x| x.is_finite() && *x < 0.0));

    let mut dec = layout.decoder_prefix.ids().to_vec();
    dec.extend_from_slice(&target[..target.len() - 1]);
    let probs = m
        .forward(&m.embed_inputs(layout.encoder.ids(), &b, Side::Encoder).unwrap(), &m.embed_inputs(&dec, &b, Side::Decoder).unwrap())
        .unwrap();
    let oracle: f64 = target.iter().enumerate().map(|(i, &t)| probs[(i + 1, t as usize)].ln()).sum();
    assert!((lp.iter().sum::<f64>() - oracle).abs() <= 1e-6 * oracle.abs());

    let shorter = token_logprobs(&m, &layout, &b, &target[..3]).unwrap();
    assert_eq!(&lp[..3], &shorter[..]);

    let uniform = UniformLm::new(v.clone());
    for x in token_logprobs(&uniform, &layout, &b, &target).unwrap() {
        assert!((x + (v.len() as f64).ln()).abs() < 1e-12);
    }
    assert!(matches!(token_logprobs(&m, &layout, &b, &[9999]), Err(ModelError::UnknownToken(9999))));
}

#[test]
fn zeroed_featurizers_make_outputs_baseline_independent() {
    let mut m = tiny::<f64>(7);
    m.zero_featurizers();
    let v = m.vocab().clone();
    let layout = build_longitudinal_prompt(&v, &[visit(&[(0, &[0])])]).unwrap();
    let target = longitudinal_answer(&v, &visit(&[(1, &[1])]), true).unwrap();
    let a = token_logprobs(&m, &layout, &baseline(0, -3.0), &target).unwrap();
    let b = token_logprobs(&m, &layout, &baseline(1, 8.0), &target).unwrap();
    assert_eq!(a, b);
}

#[test]
fn gradient_check_featurizers_and_embeddings() {
    let mut m = tiny::<f64>(8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    randomize_biases(&mut m, &mut rng);
    let v = m.vocab().clone();
    let enc = serialize_visits(&v, &[visit(&[(0, &[0, 2]), (1, &[1])])]).unwrap().into_ids();
    let answer = longitudinal_answer(&v, &visit(&[(0, &[3]), (2, &[0])]), false).unwrap();
    let mut dec = vec![BOS, VISIT_OPEN];
    dec.extend_from_slice(&answer[..answer.len() - 1]);
    let mut targets = vec![None];
    targets.extend(answer.iter().map(|&t| Some(t as usize)));
    let b = baseline(1, 0.4);
    let loss_of = |m: &ModelParams<f64>| {
        let mut g = Graph::new(m.params());
        let l = m.g_loss(&mut g, &enc, &dec, &targets, &b).unwrap();
        g.value(l)[(0, 0)]
    };
    let grads = {
        let mut g = Graph::new(m.params());
        let l = m.g_loss(&mut g, &enc, &dec, &targets, &b).unwrap();
        g.backward(l)
    };
    let names = [
        "enc.prompt_cat.w0",
        "enc.prompt_cat.b",
        "enc.prompt_cat.w1",
        "enc.prompt_num.w0",
        "enc.prompt_num.b",
        "enc.prompt_num.w1",
        "dec.prompt_cat.w0",
        "dec.prompt_cat.b",
        "dec.prompt_cat.w1",
        "dec.prompt_num.w0",
        "dec.prompt_num.b",
        "dec.prompt_num.w1",
        "tok_emb",
    ];
    let h = 1e-5;
    let mut checked = 0;
    for name in names {
        let id = m.params().find(name).unwrap();
        let n = m.params().get(id).len();
        let coords: Vec<usize> = if name == "tok_emb" {
            // Rows of tokens that occur in the example, plus a few that do not.
            let mut c: Vec<usize> = enc.iter().chain(&dec).flat_map(|&t| (0..8).map(move |j| t as usize * 8 + j)).collect();
            c.extend((0..20).map(|_| rng.random_range(0..n)));
            c.sort_unstable();
            c.dedup();
            c
        } else {
            (0..n).collect()
        };
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Matrix::zeros(m.params().get(id).rows(), m.params().get(id).cols()));
        for idx in coords {
            let orig = m.params().get(id).data()[idx];
            m.params_mut().get_mut(id).data_mut()[idx] = orig + h;
            let plus = loss_of(&m);
            m.params_mut().get_mut(id).data_mut()[idx] = orig - h;
            let minus = loss_of(&m);
            m.params_mut().get_mut(id).data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel <= 1e-4, "{name}[{idx}]: analytic {a}, numeric {numeric}");
            checked += 1;
        }
    }
    assert!(checked >= 100, "{checked}");
}

#[test]
fn targets_outside_answer_slot_carry_no_gradient() {
    let m = tiny::<f64>(9);
    let v = m.vocab().clone();
    let rec = record("p", vec![visit(&[(0, &[0])]), visit(&[(0, &[1]), (1, &[2])])]);
    let ex = build_example(&v, &rec, Task::Longitudinal, 1, None, &CorruptionConfig::identity(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(ex.targets[0], None);
    // <dx> D2 </dx> <med> M3 </med> </v> </s>
    assert_eq!(ex.answer_len(), 8);
    let none = vec![None; ex.decoder.len()];
    let mut g = Graph::new(m.params());
    let l = m.g_loss(&mut g, &ex.encoder, &ex.decoder, &none, &rec.baseline).unwrap();
    let grads = g.backward(l);
    assert_eq!(g.value(l)[(0, 0)], 0.0);
    assert!(grads.iter().all(|(_, gm)| gm.data().iter().all(|&x| x == 0.0)));
}

fn oracle_corpus(n: usize, seed: u64) -> Corpus {
    generate_oracle_corpus(&OracleSpec { seed, ..OracleSpec::demo(seed) }, n).unwrap()
}

#[test]
fn training_reduces_loss_and_is_deterministic() {
    let corpus = oracle_corpus(20, 3);
    let cfg = TrainConfig { epochs: 1, steps_per_epoch: Some(200), batch_size: 8, learning_rate: 3e-3, warmup_epochs: 0, seed: 4, ..TrainConfig::default() };
    let mc = ModelConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, d_hidden: 8, n_prompt_tokens: 1 };
    let a = train::<f32>(&corpus, &corpus.select(&[0, 1]), &mc, &cfg).unwrap();
    let first: f64 = a.step_losses[..10].iter().sum::<f64>() / 10.0;
    let last: f64 = a.step_losses[190..].iter().sum::<f64>() / 10.0;
    assert!(last < first, "{first} -> {last}");
    let b = train::<f32>(&corpus, &corpus.select(&[0, 1]), &mc, &cfg).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.step_losses, b.step_losses);
    assert_eq!(a.model.params(), b.model.params());
}

#[test]
fn learning_rate_warms_up_then_decays_linearly() {
    let corpus = oracle_corpus(8, 5);
    let cfg = TrainConfig { epochs: 4, steps_per_epoch: Some(2), batch_size: 2, learning_rate: 8e-3, warmup_epochs: 1, seed: 1, ..TrainConfig::default() };
    let mc = ModelConfig { d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, d_hidden: 4, n_prompt_tokens: 1 };
    let out = train::<f32>(&corpus, &corpus, &mc, &cfg).unwrap();
    let lrs: Vec<f64> = out.log.iter().map(|e| e.lr).collect();
    // logged lr is the one used at each epoch's last step (steps 1, 3, 5, 7)
    let expect = [8e-3, 8e-3 * 5.0 / 6.0, 8e-3 * 3.0 / 6.0, 8e-3 / 6.0];
    for (a, b) in lrs.iter().zip(expect) {
        assert!((a - b).abs() < 1e-12, "{lrs:?}");
    }
    let flat = train::<f32>(&corpus, &corpus, &mc, &TrainConfig { lr_decay: LrDecay::Constant, ..cfg }).unwrap();
    assert!(flat.log.iter().all(|e| e.lr == 8e-3));
}

#[test]
fn single_record_is_memorized() {
    let rec = record("p", vec![visit(&[(0, &[0, 2]), (2, &[1])]), visit(&[(0, &[1]), (1, &[0, 2])]), visit(&[(0, &[3])])]);
    let corpus = Corpus::new(small_schema(), vec![rec]).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        steps_per_epoch: Some(300),
        batch_size: 8,
        learning_rate: 1e-2,
        warmup_epochs: 0,
        weight_decay: 0.0,
        corruption: CorruptionConfig::identity(),
        selection: Selection::Last,
        ..TrainConfig::default()
    };
    let mc = ModelConfig { d_model: 16, n_layers: 1, n_heads: 2, d_ff: 32, d_hidden: 8, n_prompt_tokens: 1 };
    let out = train::<f32>(&corpus, &corpus, &mc, &cfg).unwrap();
    let ppl = validation_perplexity(&out.model, &corpus).unwrap().unwrap();
    assert!(ppl.ln() < 0.1, "per-token NLL {}", ppl.ln());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let m = ModelParams::<f32>::new(tiny_config(), small_schema(), NumericNorm { mean: vec![50.0], std: vec![10.0] }, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    save_checkpoint(&m, &path).unwrap();
    let back: ModelParams<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(back.params(), m.params());
    assert_eq!(back.numeric_norm(), m.numeric_norm());
    assert_eq!(back.vocab().tokens(), m.vocab().tokens());
    assert!(load_checkpoint::<f64>(&path).is_err());
}

#[test]
fn schema_mismatch_is_rejected() {
    let corpus = oracle_corpus(4, 1);
    let m = tiny::<f32>(0);
    assert!(matches!(train_from(m, &corpus, &corpus, &TrainConfig::default()), Err(ModelError::SchemaMismatch { .. })));
}

#[test]
fn cross_modal_example_uses_cloze_layout() {
    let v = Vocabulary::from_schema(&small_schema());
    let rec = record("p", vec![visit(&[(0, &[0]), (2, &[1, 2])])]);
    let ex = build_example(&v, &rec, Task::CrossModal, 0, Some(ModalityId(2)), &CorruptionConfig::identity(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(v.render(&ex.encoder), "<s> <v> <dx> dx:D1 </dx> <lab> <mask> </lab> </v> </s>");
    assert_eq!(v.render(&ex.decoder), "<s> <lab> lab:L2 lab:L3");
    assert_eq!(ex.targets.iter().map(|t| t.map(|t| v.token_str(t as u32).unwrap().to_string())).collect::<Vec<_>>(), vec![
        None,
        Some("lab:L2".to_string()),
        Some("lab:L3".to_string()),
        Some("</lab>".to_string())
    ]);
}
