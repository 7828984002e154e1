//! Acceptance suite: one test per criterion, each printing a single
//! pass line (run with `--nocapture` to see them).

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use synattn::conllu::{parse_conllu, ParsedSentence, Vocab};
use synattn::deptree::{
    build_position_graph, depth_vector, distance_matrix, mask_from_distance, DepGraph,
    PositionKind, NEG_INF,
};
use synattn::model::{init_params, ModelConfig, SequenceInput};
use synattn::numcore::{ParamSet, Tape, Tensor};
use synattn::probe::{combined_loss, distance_loss, pair_weights};
use synattn::train::{
    batch_loss_and_grads, eval_probe, evaluate_accuracy, featurize, finetune,
    full_model_grad_check, logs_to_jsonl, make_structure_task, make_tree_corpus, pretrain_gat,
    Batch, LossMode, TrainConfig,
};
use synattn::wordpiece_tokenize;

fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> DepGraph {
    let mut parent = vec![None; n];
    for i in 1..n {
        parent[i] = Some(rng.gen_range(0..i));
    }
    DepGraph {
        parent,
        kinds: (0..n).map(PositionKind::WordHead).collect(),
    }
}

/// O(n^3) all-pairs shortest paths over the undirected tree edges.
fn floyd_warshall(g: &DepGraph) -> Vec<u32> {
    let n = g.n_positions();
    let inf = u32::MAX / 4;
    let mut d = vec![inf; n * n];
    for i in 0..n {
        d[i * n + i] = 0;
    }
    for (i, p) in g.parent.iter().enumerate() {
        if let Some(p) = *p {
            d[i * n + p] = 1;
            d[p * n + i] = 1;
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i * n + k] + d[k * n + j];
                if via < d[i * n + j] {
                    d[i * n + j] = via;
                }
            }
        }
    }
    d
}

#[test]
fn criterion_1_tree_algebra_oracles() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=20);
        let g = random_tree(&mut rng, n);
        let d = distance_matrix(&g);
        let oracle = floyd_warshall(&g);
        assert_eq!(d.d, oracle, "BFS distances disagree with Floyd-Warshall");
        let deltas = [1u32, 2, 3, 7];
        for &delta in &deltas {
            let m = mask_from_distance(&d, delta);
            for i in 0..n {
                for j in 0..n {
                    let want = if d.get(i, j) <= delta { 0.0 } else { NEG_INF };
                    assert_eq!(m.m[i * n + j], want, "mask definition violated");
                }
            }
        }
        // delta-monotonicity: opening never closes as delta grows
        for w in deltas.windows(2) {
            let lo = mask_from_distance(&d, w[0]);
            let hi = mask_from_distance(&d, w[1]);
            for (a, b) in lo.m.iter().zip(&hi.m) {
                assert!(!(*a == 0.0 && *b == NEG_INF), "mask closed as delta grew");
            }
        }
    }
    let dt = start.elapsed().as_secs_f64();
    assert!(dt < 10.0, "criterion 1 took {:.1}s (limit 10s)", dt);
    println!("criterion 1 (tree-algebra oracle suite): pass ({:.1}s)", dt);
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn new(n: usize) -> UnionFind {
        UnionFind((0..n).collect())
    }
    fn find(&mut self, i: usize) -> usize {
        if self.0[i] != i {
            let r = self.find(self.0[i]);
            self.0[i] = r;
        }
        self.0[i]
    }
    fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        self.0[ra] = rb;
        ra != rb
    }
}

fn random_sentence(rng: &mut ChaCha8Rng, id: usize) -> ParsedSentence {
    let n = rng.gen_range(1..=8);
    // Multi-syllable words force wordpiece splits under a vocabulary
    // that only contains some of them whole.
    let syllables = ["ka", "ri", "to", "mu", "ne", "so"];
    let words: Vec<String> = (0..n)
        .map(|_| {
            let parts = rng.gen_range(1..=3);
            (0..parts)
                .map(|_| syllables[rng.gen_range(0..syllables.len())])
                .collect::<String>()
        })
        .collect();
    let tags = ["NOUN", "VERB", "ADJ", "DET", "ADV"];
    let tree = random_tree(rng, n);
    let mut doc = format!("# sent_id = fuzz-{}\n", id);
    for i in 0..n {
        let head = match tree.parent[i] {
            None => 0,
            Some(p) => p + 1,
        };
        doc.push_str(&format!(
            "{}\t{}\t_\t{}\t_\t_\t{}\tdep\t_\t_\n",
            i + 1,
            words[i],
            tags[rng.gen_range(0..tags.len())],
            head
        ));
    }
    parse_conllu(&doc).unwrap().remove(0)
}

#[test]
fn criterion_2_wordpiece_special_surgery() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    // Vocabulary of bare syllables plus a few whole words so splits of
    // every arity occur.
    let vocab = Vocab::from_corpus(["ka", "ri", "to", "mu", "ne", "so", "karito", "mune"].into_iter());
    for i in 0..500 {
        let s = random_sentence(&mut rng, i);
        let align = wordpiece_tokenize(&s.words, &vocab).unwrap();
        let g = build_position_graph(&s, &align).unwrap();
        let n = g.n_positions();
        // rooted at [CLS]
        assert!(matches!(g.kinds[0], PositionKind::Cls));
        assert_eq!(g.parent[0], None, "[CLS] must be the root");
        // tree-ness via union-find: n-1 proper merging edges
        let mut uf = UnionFind::new(n);
        let mut edges = 0;
        for (c, p) in g.parent.iter().enumerate() {
            if let Some(p) = *p {
                assert!(uf.union(c, *&p), "cycle in position graph");
                edges += 1;
            }
        }
        assert_eq!(edges, n - 1, "position graph edge count");
    }

    // Figure example: "the dog likes to play", delta = 1 over the word
    // tree lets "likes" attend exactly {dog, likes, play}.
    let g = DepGraph {
        parent: vec![Some(1), Some(2), None, Some(4), Some(2)],
        kinds: (0..5).map(PositionKind::WordHead).collect(),
    };
    let d = distance_matrix(&g);
    let m = mask_from_distance(&d, 1);
    let open: Vec<usize> = (0..5).filter(|&j| m.m[2 * 5 + j] == 0.0).collect();
    assert_eq!(open, vec![1, 2, 4], "\"likes\" should attend {{dog, likes, play}}");

    let dt = start.elapsed().as_secs_f64();
    assert!(dt < 5.0, "criterion 2 took {:.1}s (limit 5s)", dt);
    println!("criterion 2 (wordpiece/special-symbol surgery): pass ({:.1}s)", dt);
}

fn zero_bias_cfg() -> ModelConfig {
    let mut cfg = ModelConfig::desk_default();
    cfg.n_layers = 2;
    cfg.d_model = 16;
    cfg.d_k = 8;
    cfg.d_v = 8;
    cfg.gat_layers = 2;
    cfg.gat_heads = 2;
    cfg.d_g = 8;
    cfg.vocab_size = 40;
    cfg.max_len = 16;
    cfg
}

fn final_h(cfg: &ModelConfig, params: &ParamSet, input: &SequenceInput<'_>) -> Tensor {
    let mut tape = Tape::new();
    let vars = params.register(&mut tape);
    let state = synattn::model::encoder_forward(&mut tape, &vars, cfg, input, false).unwrap();
    tape.value(*state.h.last().unwrap()).clone()
}

#[test]
fn criterion_3_zero_bias_reduction() {
    let start = Instant::now();
    let cfg = zero_bias_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut baseline_cfg = cfg.clone();
    baseline_cfg.syntax_layers = vec![];
    for trial in 0..100 {
        // re-randomize weights per trial
        let mut reseeded = cfg.clone();
        reseeded.seed = 1000 + trial;
        let mut params = init_params(&reseeded).unwrap();
        for l in &cfg.syntax_layers {
            for name in [format!("syn.l{}.gq", l), format!("syn.l{}.gk", l)] {
                let t = params.get_mut(&name).unwrap();
                let shape = t.shape().to_vec();
                *t = Tensor::zeros(shape);
            }
        }
        let n = rng.gen_range(2..=10);
        let token_ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
        let position_ids: Vec<usize> = (0..n).collect();
        let upos_ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..17)).collect();
        let tree = random_tree(&mut rng, n);
        let dep_mask = mask_from_distance(&distance_matrix(&tree), cfg.delta);
        let pad_mask = synattn::deptree::pad_only_mask(n, n);
        let input = SequenceInput {
            token_ids: &token_ids,
            position_ids: &position_ids,
            upos_ids: &upos_ids,
            dep_mask: &dep_mask,
            pad_mask: &pad_mask,
        };
        let fused = final_h(&cfg, &params, &input);
        let plain = final_h(&baseline_cfg, &params, &input);
        assert!(
            fused.max_abs_diff(&plain) <= 1e-12,
            "zero-bias output diverges from baseline"
        );
    }
    let dt = start.elapsed().as_secs_f64();
    assert!(dt < 30.0, "criterion 3 took {:.1}s (limit 30s)", dt);
    println!("criterion 3 (zero-bias reduction): pass ({:.1}s)", dt);
}

#[test]
fn criterion_4_gradient_fidelity() {
    let start = Instant::now();
    // 4 words -> 6 positions with [CLS]/[SEP]; 2 layers, 2 heads,
    // alpha = 0.5.
    let doc = "\
# sent_id = grad-fidelity
# label = 1
1\tthe\t_\tDET\t_\t_\t2\tdet\t_\t_
2\tdog\t_\tNOUN\t_\t_\t3\tnsubj\t_\t_
3\tsleeps\t_\tVERB\t_\t_\t0\troot\t_\t_
4\tsoundly\t_\tADV\t_\t_\t3\tadvmod\t_\t_
";
    let sentences = parse_conllu(doc).unwrap();
    let vocab =
        Vocab::from_corpus(sentences.iter().flat_map(|s| s.words.iter().map(|w| w.as_str())));
    let mut cfg = synattn::cli::grad_check_default();
    cfg.vocab_size = vocab.len();
    assert_eq!(cfg.n_layers, 2);
    assert_eq!(cfg.n_heads, 2);
    assert_eq!(cfg.alpha, 0.5);
    let err = full_model_grad_check(&cfg, &sentences, &vocab, 1e-5).unwrap();
    assert!(err < 1e-4, "max relative error {} (limit 1e-4)", err);
    let dt = start.elapsed().as_secs_f64();
    assert!(dt < 60.0, "criterion 4 took {:.1}s (limit 60s)", dt);
    println!(
        "criterion 4 (gradient fidelity): pass (max rel err {:.2e}, {:.1}s)",
        err, dt
    );
}

struct PretrainOutcome {
    jsonl: String,
    distance_loss: f64,
    uuas: f64,
    root_accuracy: f64,
    seconds: f64,
}

fn criterion5_pipeline() -> PretrainOutcome {
    let doc = make_tree_corpus(11, 50, 12);
    let sentences = parse_conllu(&doc).unwrap();
    let vocab = Vocab::from_corpus(sentences.iter().flat_map(|s| s.words.iter().map(|w| w.as_str())));
    let mut cfg = ModelConfig::desk_default();
    cfg.vocab_size = vocab.len();
    assert_eq!(cfg.gat_layers, 4);
    assert_eq!(cfg.gat_heads, 4);
    assert_eq!(cfg.d_g, 64);
    let tcfg = TrainConfig::pretrain_default();
    assert!(tcfg.steps <= 2000);
    let start = Instant::now();
    let (trainer, logs) = pretrain_gat(&sentences, &vocab, cfg.clone(), tcfg).unwrap();
    let feats: Vec<_> = sentences.iter().map(|s| featurize(s, &vocab).unwrap()).collect();
    let mut ld = 0.0;
    for f in &feats {
        let b = Batch::build(&[f], &cfg, &vocab, false).unwrap();
        let (l, _) =
            batch_loss_and_grads(&cfg, &trainer.params, &b, LossMode::GatOnly, false).unwrap();
        ld += l.l_dist;
    }
    ld /= feats.len() as f64;
    let metrics = eval_probe(&cfg, &trainer.params, &feats, false).unwrap();
    let n = metrics.len() as f64;
    let uuas = metrics.iter().map(|(_, m)| m.uuas).sum::<f64>() / n;
    let root = metrics.iter().filter(|(_, m)| m.root_correct).count() as f64 / n;
    PretrainOutcome {
        jsonl: logs_to_jsonl(&logs),
        distance_loss: ld,
        uuas,
        root_accuracy: root,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn criterion5_first() -> &'static PretrainOutcome {
    static ONCE: OnceLock<PretrainOutcome> = OnceLock::new();
    ONCE.get_or_init(criterion5_pipeline)
}

#[test]
fn criterion_5_probe_recovery() {
    let out = criterion5_first();
    assert!(
        out.distance_loss < 0.05,
        "distance_loss {} (limit 0.05)",
        out.distance_loss
    );
    assert!(out.uuas >= 0.95, "UUAS {} (limit 0.95)", out.uuas);
    assert!(
        out.root_accuracy >= 0.95,
        "root accuracy {} (limit 0.95)",
        out.root_accuracy
    );
    assert!(
        out.seconds < 180.0,
        "criterion 5 took {:.1}s (limit 180s)",
        out.seconds
    );
    println!(
        "criterion 5 (probe recovery): pass (distance_loss {:.4}, UUAS {:.3}, root {:.3}, {:.1}s)",
        out.distance_loss, out.uuas, out.root_accuracy, out.seconds
    );
}

struct FinetuneOutcome {
    jsonl: String,
    accuracy: f64,
    baseline_accuracy: f64,
    seconds: f64,
}

fn criterion6_pipeline() -> FinetuneOutcome {
    let doc = make_structure_task(5, 1000);
    let sentences = parse_conllu(&doc).unwrap();
    let vocab = Vocab::from_corpus(sentences.iter().flat_map(|s| s.words.iter().map(|w| w.as_str())));
    let mut cfg = ModelConfig::desk_default();
    cfg.vocab_size = vocab.len();
    cfg.probe_rank = Some(128);
    let start = Instant::now();
    // Warm-start the GAT on the same trees, then fine-tune jointly.
    let mut ptcfg = TrainConfig::pretrain_default();
    ptcfg.steps = 1000;
    let (pre, _) = pretrain_gat(&sentences, &vocab, cfg.clone(), ptcfg).unwrap();
    let mut tcfg = TrainConfig::finetune_default();
    tcfg.batch_size = 24;
    tcfg.steps = 400;
    assert!(tcfg.steps <= 500);
    let feats: Vec<_> = sentences.iter().map(|s| featurize(s, &vocab).unwrap()).collect();
    cfg.alpha = 0.5;
    let (tr, logs) = finetune(&sentences, &vocab, cfg.clone(), tcfg.clone(), Some(&pre.params)).unwrap();
    let accuracy = evaluate_accuracy(&cfg, &tr.params, &feats, &vocab).unwrap();
    // alpha = 0 baseline, logged for comparison (no threshold)
    let mut base_cfg = cfg.clone();
    base_cfg.alpha = 0.0;
    let (btr, blogs) = finetune(&sentences, &vocab, base_cfg.clone(), tcfg, Some(&pre.params)).unwrap();
    let baseline_accuracy = evaluate_accuracy(&base_cfg, &btr.params, &feats, &vocab).unwrap();
    let mut jsonl = logs_to_jsonl(&logs);
    jsonl.push_str("# alpha = 0 baseline\n");
    jsonl.push_str(&logs_to_jsonl(&blogs));
    FinetuneOutcome {
        jsonl,
        accuracy,
        baseline_accuracy,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn criterion6_first() -> &'static FinetuneOutcome {
    static ONCE: OnceLock<FinetuneOutcome> = OnceLock::new();
    ONCE.get_or_init(criterion6_pipeline)
}

#[test]
fn criterion_6_structure_task_fit() {
    let out = criterion6_first();
    assert!(
        out.accuracy >= 0.95,
        "train accuracy {} (limit 0.95)",
        out.accuracy
    );
    assert!(
        out.seconds < 300.0,
        "criterion 6 took {:.1}s (limit 300s)",
        out.seconds
    );
    println!(
        "criterion 6 (structure-task fit): pass (accuracy {:.3}, alpha=0 baseline {:.3}, {:.1}s)",
        out.accuracy, out.baseline_accuracy, out.seconds
    );
}

#[test]
fn criterion_7_loss_definition_spot_checks() {
    // distance_loss hand value: n = 2, gold distance 1, all-zero
    // predictions -> (|1-0| + |1-0|) / 4 = 0.5 exactly.
    let mut tape = Tape::new();
    let theta = tape.input(Tensor::zeros(vec![2, 2]));
    let g = tape.input(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
    let gold = Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
    let w = pair_weights(&[0, 1], 2);
    let loss = distance_loss(&mut tape, theta, g, &gold, &w).unwrap();
    assert_eq!(tape.value(loss).item(), 0.5);

    // combined_loss linearity in alpha, exactly
    let lt = tape.input(Tensor::scalar(2.0));
    let ld = tape.input(Tensor::scalar(0.5));
    let lp = tape.input(Tensor::scalar(0.25));
    let at0 = combined_loss(&mut tape, lt, ld, lp, 0.0).unwrap();
    let at1 = combined_loss(&mut tape, lt, ld, lp, 1.0).unwrap();
    let at2 = combined_loss(&mut tape, lt, ld, lp, 2.0).unwrap();
    assert_eq!(tape.value(at0).item(), 2.0);
    assert_eq!(tape.value(at1).item() - tape.value(at0).item(), 0.75);
    assert_eq!(tape.value(at2).item() - tape.value(at1).item(), 0.75);
    println!("criterion 7 (loss-definition spot checks): pass");
}

#[test]
fn criterion_8_determinism() {
    let first5 = criterion5_first();
    let again5 = criterion5_pipeline();
    assert_eq!(
        first5.jsonl, again5.jsonl,
        "pretraining metric logs differ between identical runs"
    );
    let first6 = criterion6_first();
    let again6 = criterion6_pipeline();
    assert_eq!(
        first6.jsonl, again6.jsonl,
        "fine-tuning metric logs differ between identical runs"
    );
    println!("criterion 8 (determinism): pass");
}

// Supporting sanity checks: depth vector agrees with distances from the
// root on fuzzed trees.
#[test]
fn depths_match_root_distances() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    for _ in 0..200 {
        let n = rng.gen_range(1..=15);
        let g = random_tree(&mut rng, n);
        let d = distance_matrix(&g);
        let h = depth_vector(&g);
        let root = g.parent.iter().position(|p| p.is_none()).unwrap();
        for i in 0..n {
            assert_eq!(h.depths[i], d.get(root, i));
        }
    }
}
