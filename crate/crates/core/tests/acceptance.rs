//! Acceptance criteria A1–A11. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line; exits non-zero on any FAIL.

mod common;

use std::io::{Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use common::{adam, copy_model, numeric_grad, words};
use fedbot_core::autograd::Graph;
use fedbot_core::client::{
    effective_config, provision, run_client, spawn_local_client, ClientNode, Provenance, RunOptions,
};
use fedbot_core::combiner::{
    accept_clients, aggregate_round, incremental_merge, ClientUpdateMsg, FederationConfig,
    FederationOutcome, FederationState, MergeMode,
};
use fedbot_core::data::{client_name, copy_task_pairs, partition, ClientDataset, ConversationPair};
use fedbot_core::protocol::{deserialize_weights, serialize_weights, ProtocolError, RoundHyper};
use fedbot_core::tensor::Tensor;
use fedbot_core::tokenizer::{train_vocab, TokenSequence, Vocabulary, END};
use fedbot_core::train::{
    client_update, encode_pairs, local_evaluate, shifted_targets, EncodedPair, LocalTrainConfig,
    OptimizerKind, Trainer,
};
use fedbot_core::transformer::{count_parameters, init_weights, Bound, IdBatch, TransformerConfig};
use fedbot_core::weights::ModelWeights;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, &'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_weights(rng: &mut ChaCha8Rng, layout: &[(String, Vec<usize>)]) -> ModelWeights {
    let mut w = ModelWeights::new();
    for (name, shape) in layout {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-10.0f32..10.0)).collect();
        w.insert(name.clone(), Tensor::new(shape.clone(), data).unwrap())
            .unwrap();
    }
    w
}

fn random_layout(rng: &mut ChaCha8Rng) -> Vec<(String, Vec<usize>)> {
    (0..rng.gen_range(1..=4))
        .map(|i| {
            let shape = (0..rng.gen_range(1..=3))
                .map(|_| rng.gen_range(1..=6))
                .collect();
            (format!("t{i}"), shape)
        })
        .collect()
}

fn a1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA1);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let layout = random_layout(&mut rng);
        let ups: Vec<ClientUpdateMsg> = (0..rng.gen_range(2..=10))
            .map(|k| {
                let n_k = rng.gen_range(1..=1000);
                ClientUpdateMsg {
                    client_id: format!("c{k}"),
                    n_k,
                    weights: random_weights(&mut rng, &layout),
                    report: Default::default(),
                }
            })
            .collect();
        let got = aggregate_round(&ups).map_err(|e| format!("trial {trial}: {e}"))?;
        let total: f64 = ups.iter().map(|u| u.n_k as f64).sum();
        for (name, _) in &layout {
            for (i, &g) in got.get(name).unwrap().data().iter().enumerate() {
                let mut acc = 0.0f64;
                for u in &ups {
                    acc += u.n_k as f64 * f64::from(u.weights.get(name).unwrap().data()[i]);
                }
                let want = acc / total;
                worst = worst.max((f64::from(g) - want).abs() / want.abs().max(1e-12));
            }
        }
    }
    check(worst <= 1e-6, format!("max relative error {worst:.2e}"))?;
    Ok(format!("100 trials, max relative error {worst:.2e}"))
}

fn scalar(v: f32) -> ModelWeights {
    let mut w = ModelWeights::new();
    w.insert("w", Tensor::new(vec![1], vec![v]).unwrap())
        .unwrap();
    w
}

fn a2() -> Outcome {
    let get = |w: &ModelWeights| w.get("w").unwrap().data()[0];
    let first = incremental_merge(&scalar(-7.0), &scalar(2.5), 1).map_err(|e| e.to_string())?;
    check(get(&first) == 2.5, "t=1 does not replace")?;
    let mut g = scalar(11.0);
    for t in 1..=10 {
        g = incremental_merge(&g, &scalar(0.375), t).map_err(|e| e.to_string())?;
        check(get(&g) == 0.375, format!("fixed point broken at t={t}"))?;
    }
    // Aggregates 2, 4, 9, 1, 4 give running means 2, 3, 5, 4, 4.
    let expected = [2.0, 3.0, 5.0, 4.0, 4.0];
    let mut g = scalar(0.0);
    for (t, (a, want)) in [2.0, 4.0, 9.0, 1.0, 4.0]
        .into_iter()
        .zip(expected)
        .enumerate()
    {
        g = incremental_merge(&g, &scalar(a), t as u32 + 1).map_err(|e| e.to_string())?;
        check(
            (get(&g) - want).abs() <= 1e-6,
            format!("round {}: {} vs {want}", t + 1, get(&g)),
        )?;
    }
    Ok("replacement at t=1, fixed point, 5-round recurrence".into())
}

fn a3() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let vocab = Vocabulary::from_tokens(words(20));
    let model = copy_model(vocab.len(), 8);
    let pairs = copy_task_pairs(&words(20), 50, (2, 5), 3);
    let node = Arc::new(
        ClientNode::new(
            tmp.path(),
            ClientDataset::split("solo", pairs),
            model.clone(),
            vocab.clone(),
        )
        .map_err(|e| e.to_string())?,
    );
    let local = LocalTrainConfig {
        epochs: 2,
        lr: 0.1,
        batch_size: 8,
        optimizer: OptimizerKind::Sgd,
        seed: 4,
        dropout: false,
        warmup: 0,
    };
    let initial = init_weights::<f32>(&model, 1).map_err(|e| e.to_string())?;
    let config = FederationConfig {
        rounds: 5,
        fraction: 1.0,
        min_clients: 1,
        merge: MergeMode::Replace,
        ..Default::default()
    };
    let (tx, rx) = mpsc::channel();
    spawn_local_client(node.clone(), local, tx).map_err(|e| e.to_string())?;
    let out = FederationState::new(config, initial.clone())
        .map_err(|e| e.to_string())?
        .run(&rx)
        .map_err(|e| e.to_string())?;

    let data = encode_pairs(
        &vocab,
        &node.snapshot().map_err(|e| e.to_string())?,
        model.max_len,
    );
    let hyper = RoundHyper {
        epochs: 0,
        lr: 0.0,
        batch: 0,
        deadline_ms: 0,
    };
    let mut w = initial;
    for t in 1..=5 {
        w = client_update(&w, &model, &data, &effective_config(&local, &hyper, t))
            .map_err(|e| e.to_string())?
            .weights;
    }
    check(
        out.weights.bit_eq(&w),
        "federated weights differ from sequential training",
    )?;
    Ok("k=1, 5 rounds, replace merge: bit-identical to 5 sequential client_update calls".into())
}

fn a4() -> Outcome {
    let model = TransformerConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        d_ff: 16,
        ..copy_model(20, 6)
    };
    // A ReLU input within one step of zero makes the central difference
    // straddle the kink; most seeds have one somewhere at a 1e-3 step. Seed 0
    // has none. tests/transformer.rs repeats the check on other seeds with a
    // step small enough to stay on one side.
    let w = init_weights::<f64>(&model, 0).map_err(|e| e.to_string())?;
    let vocab = Vocabulary::from_tokens(words(16));
    let data = encode_pairs(
        &vocab,
        &copy_task_pairs(&words(16), 3, (1, 4), 4),
        model.max_len,
    );
    let refs: Vec<&EncodedPair> = data.iter().collect();
    let src: Vec<TokenSequence> = data.iter().map(|p| p.src.clone()).collect();
    let tgt: Vec<TokenSequence> = data.iter().map(|p| p.tgt.clone()).collect();
    let (targets, keep) = shifted_targets(&refs);
    let loss_of = |w: &ModelWeights<f64>| {
        let g = Graph::new();
        let bound = Bound::new(&g, w, &model, None).unwrap();
        let logits = bound
            .forward(
                &IdBatch::from_sequences(&src),
                &IdBatch::from_sequences(&tgt),
            )
            .unwrap();
        let ce = g.cross_entropy(logits, &targets, &keep).unwrap();
        (g, ce.loss)
    };
    let (g, loss) = loss_of(&w);
    let grads = g.backward(loss).map_err(|e| e.to_string())?;
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for (name, t) in w.iter() {
        let analytic = grads.get(name).ok_or(format!("no gradient for {name}"))?;
        let numeric = numeric_grad(
            |x| {
                let mut moved = w.clone();
                *moved.get_mut(name).unwrap() = x.clone();
                let (g, l) = loss_of(&moved);
                let v = g.value(l).item();
                v
            },
            t,
            common::FD_STEP,
        );
        for (&a, &n) in analytic.data().iter().zip(&numeric) {
            // Relative, with an absolute floor for gradients that vanish.
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-4);
            if err > worst.0 {
                worst = (err, name.to_string());
            }
        }
        checked += numeric.len();
    }
    check(
        checked == count_parameters(&model),
        "not every parameter was checked",
    )?;
    check(
        worst.0 <= 1e-3,
        format!("max relative error {:.2e} in {}", worst.0, worst.1),
    )?;
    Ok(format!(
        "{checked} parameters, max relative error {:.2e} ({})",
        worst.0, worst.1
    ))
}

fn a5() -> Outcome {
    let words = words(46);
    let vocab = Vocabulary::from_tokens(words.iter());
    let model = copy_model(vocab.len(), 8);
    let pairs = copy_task_pairs(&words, 250, (2, 6), 1);
    let train = encode_pairs(&vocab, &pairs[..200], model.max_len);
    let val = encode_pairs(&vocab, &pairs[200..], model.max_len);
    let cfg = adam(0.001, 4, 30, 3);
    let mut trainer = Trainer::new(
        init_weights(&model, 1).map_err(|e| e.to_string())?,
        &model,
        &cfg,
    )
    .map_err(|e| e.to_string())?;
    for epoch in 0..cfg.epochs {
        let (_, train_acc) = trainer.epoch(&train, epoch).map_err(|e| e.to_string())?;
        let (val_acc, _) =
            local_evaluate(trainer.weights(), &model, &val).map_err(|e| e.to_string())?;
        if val_acc >= 95.0 {
            return Ok(format!(
                "vocab {}, held-out token accuracy {val_acc:.1}% after {} epochs (train {train_acc:.1}%)",
                vocab.len(),
                epoch + 1
            ));
        }
    }
    let (val_acc, _) =
        local_evaluate(trainer.weights(), &model, &val).map_err(|e| e.to_string())?;
    Err(format!(
        "held-out token accuracy {val_acc:.1}% after 30 epochs"
    ))
}

struct Federated {
    outcome: FederationOutcome,
    union_val: Vec<EncodedPair>,
    model: TransformerConfig,
}

fn federate(parts: Vec<ClientDataset>, vocab: &Vocabulary) -> Result<Federated, String> {
    let model = copy_model(vocab.len(), 8);
    let union: Vec<ConversationPair> = parts.iter().flat_map(|p| p.validation.clone()).collect();
    let union_val = encode_pairs(vocab, &union, model.max_len);
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (tx, rx) = mpsc::channel();
    for p in parts {
        let dir = tmp.path().join(&p.client_id);
        std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let node =
            ClientNode::new(&dir, p, model.clone(), vocab.clone()).map_err(|e| e.to_string())?;
        spawn_local_client(Arc::new(node), adam(0.002, 4, 5, 5), tx.clone())
            .map_err(|e| e.to_string())?;
    }
    let config = FederationConfig {
        rounds: 10,
        min_clients: 3,
        seed: 9,
        merge: MergeMode::Incremental,
        ..Default::default()
    };
    let mut state =
        FederationState::new(config, init_weights(&model, 1).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let (m, v) = (model.clone(), union_val.clone());
    state.set_evaluator(move |w| local_evaluate(w, &m, &v).ok());
    let outcome = state.run(&rx).map_err(|e| e.to_string())?;
    Ok(Federated {
        outcome,
        union_val,
        model,
    })
}

fn global(history: &[fedbot_core::metrics::RoundMetrics], t: usize) -> Result<(f64, f64), String> {
    let r = history.get(t - 1).ok_or(format!("round {t} missing"))?;
    Ok((
        r.global_val_acc.ok_or("no global accuracy")?,
        r.global_val_loss.ok_or("no global loss")?,
    ))
}

fn a6() -> Outcome {
    let words = words(46);
    let vocab = Vocabulary::from_tokens(words.iter());
    let pairs = copy_task_pairs(&words, 300, (2, 6), 1);
    let parts = partition(&pairs, 3, 2).map_err(|e| e.to_string())?;
    check(
        parts.iter().all(|p| p.len() == 100),
        "shards are not 100 pairs each",
    )?;
    let fed = federate(parts, &vocab)?;
    let (acc1, loss1) = global(&fed.outcome.history, 1)?;
    let (acc10, loss10) = global(&fed.outcome.history, 10)?;
    let summary =
        format!("global val acc {acc1:.1}% -> {acc10:.1}%, loss {loss1:.3} -> {loss10:.3}");
    check(acc10 - acc1 >= 20.0 && loss10 < loss1, summary.clone())?;
    Ok(summary)
}

fn a7() -> Outcome {
    let words = words(45);
    let vocab = Vocabulary::from_tokens(words.iter());
    let parts = (0..3)
        .map(|k| {
            ClientDataset::split(
                client_name(k),
                copy_task_pairs(&words[k * 15..(k + 1) * 15], 100, (2, 6), 10 + k as u64),
            )
        })
        .collect();
    let fed = federate(parts, &vocab)?;
    let (global_acc, _) = global(&fed.outcome.history, 10)?;
    let mut best = (f64::NEG_INFINITY, String::new());
    for p in &fed.outcome.partials {
        let (acc, _) =
            local_evaluate(&p.weights, &fed.model, &fed.union_val).map_err(|e| e.to_string())?;
        if acc > best.0 {
            best = (acc, p.client_id.clone());
        }
    }
    check(fed.outcome.partials.len() == 3, "missing partial models")?;
    let summary = format!(
        "global {global_acc:.1}% vs best partial {:.1}% ({})",
        best.0, best.1
    );
    check(global_acc >= best.0, summary.clone())?;
    Ok(summary)
}

fn a8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA8);
    for trial in 0..1000 {
        let layout = random_layout(&mut rng);
        let mut w = random_weights(&mut rng, &layout);
        // Arbitrary bit patterns in one tensor, NaN payloads included.
        let t = w.get_mut("t0").unwrap();
        let bits = (0..t.len()).map(|_| f32::from_bits(rng.gen())).collect();
        *t = Tensor::new(t.shape().to_vec(), bits).unwrap();
        let bytes = serialize_weights(&w);
        let back = deserialize_weights(&bytes).map_err(|e| format!("trial {trial}: {e}"))?;
        check(
            back.bit_eq(&w) && serialize_weights(&back) == bytes,
            format!("trial {trial}: not bit-exact"),
        )?;
        let cut = rng.gen_range(0..bytes.len());
        check(
            matches!(
                deserialize_weights(&bytes[..cut]),
                Err(ProtocolError::Truncation { .. } | ProtocolError::Format(_))
            ),
            format!("trial {trial}: prefix of {cut} bytes accepted"),
        )?;
        let mut bad = bytes.clone();
        bad[rng.gen_range(0..4)] ^= 0x20;
        check(
            matches!(deserialize_weights(&bad), Err(ProtocolError::Format(_))),
            format!("trial {trial}: bad magic accepted"),
        )?;
    }
    Ok("1000 random round trips bit-exact; truncation and bad magic rejected".into())
}

const TEMPLATES: [(&str, &str); 6] = [
    (
        "my {item} order {num} has not arrived yet",
        "sorry to hear that, please send us your order number {num} by dm",
    ),
    (
        "the {item} app keeps crashing when i log in",
        "please reinstall the {item} app and let us know if it persists",
    ),
    (
        "i was charged twice for my {item} subscription",
        "we will refund the duplicate {item} charge within five days",
    ),
    (
        "how do i reset the password on my {item} account",
        "you can reset it from the {item} settings page",
    ),
    (
        "my {item} delivery driver left the parcel outside",
        "we apologise, we have flagged delivery {num} to the courier",
    ),
    (
        "can i change the address on booking {num}",
        "yes, reply with the new address for booking {num}",
    ),
];
const ITEMS: [&str; 6] = [
    "phone",
    "laptop",
    "router",
    "tablet",
    "kettle",
    "headphones",
];

fn support_pairs(n: usize, seed: u64) -> Vec<ConversationPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (q, r) = TEMPLATES.choose(&mut rng).unwrap();
            let item = ITEMS.choose(&mut rng).unwrap();
            let num = rng.gen_range(100_000..999_999).to_string();
            let fill = |s: &str| s.replace("{item}", item).replace("{num}", &num);
            ConversationPair::normalized(&fill(q), &fill(r), "acme").unwrap()
        })
        .collect()
}

/// Bytes seen in one direction of one proxied connection.
type Capture = Arc<Mutex<Vec<u8>>>;

/// Forwards one connection to `upstream`, recording each direction.
fn proxy(listener: TcpListener, upstream: String, captured: Arc<Mutex<Vec<Capture>>>) {
    for conn in listener.incoming() {
        let Ok(client) = conn else { break };
        let Ok(server) = TcpStream::connect(&upstream) else {
            break;
        };
        for (mut from, mut to) in [
            (client.try_clone().unwrap(), server.try_clone().unwrap()),
            (server, client),
        ] {
            let log = Arc::new(Mutex::new(Vec::new()));
            captured.lock().unwrap().push(log.clone());
            thread::spawn(move || {
                let mut buf = [0u8; 16 * 1024];
                loop {
                    match from.read(&mut buf) {
                        Ok(0) | Err(_) => break,
                        Ok(n) => {
                            log.lock().unwrap().extend_from_slice(&buf[..n]);
                            if to.write_all(&buf[..n]).is_err() {
                                break;
                            }
                        }
                    }
                }
                let _ = to.shutdown(Shutdown::Write);
            });
        }
    }
}

fn a9() -> Outcome {
    let err = |e: &dyn std::fmt::Display| e.to_string();
    let tmp = tempfile::tempdir().map_err(|e| err(&e))?;
    let parts: Vec<ClientDataset> = (0..3)
        .map(|k| ClientDataset::split(client_name(k), support_pairs(30, 90 + k as u64)))
        .collect();
    let corpus: Vec<String> = parts
        .iter()
        .flat_map(|p| p.train.iter().chain(&p.validation))
        .flat_map(|p| [p.query.clone(), p.response.clone()])
        .collect();
    let vocab = train_vocab(&corpus, 400, 2).map_err(|e| err(&e))?;
    let model = TransformerConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        ..copy_model(vocab.len(), 24)
    };
    let mut nodes = Vec::new();
    for p in &parts {
        let dir = provision(tmp.path(), p, 0, &model, &vocab).map_err(|e| err(&e))?;
        let node = ClientNode::open(dir).map_err(|e| err(&e))?;
        node.add_local_pair(
            "my account pin is 4711 and my name is jo bloggs",
            "thanks jo, your pin 4711 is noted",
            Provenance::Feedback,
        )
        .map_err(|e| err(&e))?;
        nodes.push(Arc::new(node));
    }

    let combiner = TcpListener::bind("127.0.0.1:0").map_err(|e| err(&e))?;
    let upstream = combiner.local_addr().map_err(|e| err(&e))?.to_string();
    let front = TcpListener::bind("127.0.0.1:0").map_err(|e| err(&e))?;
    let front_addr = front.local_addr().map_err(|e| err(&e))?.to_string();
    let captured = Arc::new(Mutex::new(Vec::new()));
    let cap = captured.clone();
    thread::spawn(move || proxy(front, upstream, cap));
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || accept_clients(combiner, tx));

    let mut clients = Vec::new();
    for node in &nodes {
        let opts = RunOptions {
            backoff_initial: Duration::from_millis(20),
            ..Default::default()
        };
        let stop = opts.stop.clone();
        let (addr, node) = (front_addr.clone(), node.clone());
        clients.push((
            stop,
            thread::spawn(move || run_client(&addr, node, adam(0.01, 8, 1, 1), opts)),
        ));
    }
    let config = FederationConfig {
        rounds: 3,
        min_clients: 3,
        timeout_ms: 60_000,
        ..Default::default()
    };
    let out = FederationState::new(config, init_weights(&model, 1).map_err(|e| err(&e))?)
        .map_err(|e| err(&e))?
        .run(&rx)
        .map_err(|e| err(&e))?;
    for node in &nodes {
        let deadline = Instant::now() + Duration::from_secs(10);
        while node.global().is_none_or(|g| g.t < 3) && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(10));
        }
    }
    for (stop, handle) in clients {
        stop.stop();
        let _ = handle.join();
    }
    check(
        out.history.len() == 3 && out.history.iter().all(|r| r.n_received == 3),
        "federation did not complete",
    )?;

    let streams: Vec<Vec<u8>> = captured
        .lock()
        .unwrap()
        .iter()
        .map(|s| s.lock().unwrap().clone())
        .collect();
    let total: usize = streams.iter().map(Vec::len).sum();
    check(total > 0, "nothing captured")?;
    let mut texts = corpus;
    for node in &nodes {
        for p in node.additions().map_err(|e| err(&e))?.pairs {
            texts.push(p.query);
            texts.push(p.response);
        }
    }
    for text in &texts {
        for window in text.as_bytes().windows(8) {
            if streams.iter().any(|s| s.windows(8).any(|b| b == window)) {
                return Err(format!(
                    "captured bytes contain {:?}",
                    String::from_utf8_lossy(window)
                ));
            }
        }
    }
    Ok(format!(
        "3 clients, 3 rounds, {total} bytes captured, {} texts clean",
        texts.len()
    ))
}

fn a10() -> Outcome {
    let toy = TransformerConfig {
        vocab_size: 100,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        ..TransformerConfig::default()
    };
    // Hand count, d = 8, f = 16, V = 100:
    //   embeddings        2 * V * d                        = 1600
    //   attention block   4 * d * d + 4 * d                =  288
    //   layer norm        2 * d                            =   16
    //   feed-forward      d * f + f + f * d + d            =  280
    //   encoder layer     288 + 16 + 280 + 16              =  600
    //   decoder layer     288 + 16 + 288 + 16 + 280 + 16   =  904
    //   projection        d * V + V                        =  900
    const HAND_COUNT: usize = 4004;
    let got = count_parameters(&toy);
    check(got == HAND_COUNT, format!("{got} != {HAND_COUNT}"))?;
    Ok(format!("toy config counts {got}; the published 19,639,619 depends on an unstated vocabulary and is not asserted"))
}

fn a11() -> Outcome {
    let model = copy_model(24, 8);
    let vocab = Vocabulary::from_tokens(words(20));
    let mut rng = ChaCha8Rng::seed_from_u64(0xB11);
    for seed in 0..10 {
        let data = encode_pairs(
            &vocab,
            &copy_task_pairs(&words(20), rng.gen_range(1..40), (1, 6), seed),
            model.max_len,
        );
        let (acc, loss) = local_evaluate(
            &init_weights(&model, seed).map_err(|e| e.to_string())?,
            &model,
            &data,
        )
        .map_err(|e| e.to_string())?;
        check(
            (0.0..=100.0).contains(&acc) && loss >= 0.0,
            format!("seed {seed}: accuracy {acc}, loss {loss}"),
        )?;
    }
    // Every target is END; the projection always answers END.
    let mut w = init_weights::<f32>(&model, 0).map_err(|e| e.to_string())?;
    let proj = w.get_mut("proj.out.w").unwrap();
    *proj = Tensor::new(proj.shape().to_vec(), vec![0.0; proj.len()]).unwrap();
    let bias = w.get_mut("proj.out.b").unwrap();
    let mut b = vec![0.0; bias.len()];
    b[END as usize] = 50.0;
    *bias = Tensor::new(bias.shape().to_vec(), b).unwrap();
    let data: Vec<EncodedPair> = encode_pairs(
        &vocab,
        &copy_task_pairs(&words(20), 20, (1, 6), 1),
        model.max_len,
    )
    .into_iter()
    .map(|p| EncodedPair {
        src: p.src,
        tgt: TokenSequence::frame(&[], model.max_len),
    })
    .collect();
    let (acc, loss) = local_evaluate(&w, &model, &data).map_err(|e| e.to_string())?;
    check(
        acc == 100.0 && loss < 1e-3,
        format!("rigged model scored {acc}% / {loss:.2e}"),
    )?;
    Ok(format!(
        "accuracy within [0, 100] on 10 random models; rigged model {acc}% / loss {loss:.1e}"
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("A1", "aggregation oracle", a1),
        ("A2", "incremental merge algebra", a2),
        ("A3", "centralized equivalence", a3),
        ("A4", "gradient integrity", a4),
        ("A5", "copy-task convergence", a5),
        ("A6", "federated convergence", a6),
        ("A7", "global beats partials", a7),
        ("A8", "serialization", a8),
        ("A9", "privacy wire check", a9),
        ("A10", "parameter counting", a10),
        ("A11", "metrics bounds", a11),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f.eq_ignore_ascii_case(id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("{id} PASS {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("{id} FAIL {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
