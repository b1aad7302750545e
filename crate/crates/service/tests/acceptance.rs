//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refineir::cav::{labeled_positives, unlabeled_for, LabeledSet};
use refineir::{
    generate_corpus, run_tool_eval, search, snap_crop, stability_curve, train_random_cav,
    CavRegistry, ConceptVector, Corpus, CorpusHeader, EvalConfig, ImageRecord, NegativeMode,
    QueryState, SearchFilter, SyntheticCorpus, SyntheticSpec, Tier, Tool, TrainerConfig,
};
use refineir_service::{router, AppState, Config};
use serde_json::{json, Value};
use tokio::io::{AsyncReadExt, AsyncWriteExt};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2} s", d.as_secs_f64())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

// 1. exact k-NN against an independent full sort

fn brute_force(
    records: &[ImageRecord],
    query: &[f64],
    filter: &SearchFilter,
    k: usize,
) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = records
        .iter()
        .filter(|r| {
            r.tier == filter.tier
                && !filter.exclude_ids.contains(&r.id)
                && filter
                    .allowed_categories
                    .as_ref()
                    .is_none_or(|c| c.contains(&r.diagnosis))
        })
        .map(|r| {
            let mut acc = 0.0;
            for (a, b) in query.iter().zip(&r.embedding) {
                acc += (a - b) * (a - b);
            }
            (r.id.clone(), acc.sqrt())
        })
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn knn_exactness() -> Verdict {
    const DIM: usize = 128;
    let categories = ["a", "b", "c"];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let start = Instant::now();
    let mut mismatches = 0;
    let mut queries = 0;
    for c in 0..50 {
        let n = rng.random_range(50..=1000);
        let mut records: Vec<ImageRecord> = Vec::with_capacity(n);
        for i in 0..n {
            // about 5% exact duplicates to exercise tie breaking
            let embedding = if i > 0 && rng.random_bool(0.05) {
                records[rng.random_range(0..i)].embedding.clone()
            } else {
                (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect()
            };
            records.push(ImageRecord {
                id: format!("c{c}_r{:04}", rng.random_range(0..10_000) * 1000 + i),
                source_uri: String::new(),
                tier: Tier::Full,
                parent_id: None,
                region: None,
                size: None,
                diagnosis: categories.choose(&mut rng).unwrap().to_string(),
                concept_labels: None,
                oracle_intensities: None,
                embedding,
            });
        }
        let header = CorpusHeader::new(DIM, categories.map(String::from).to_vec(), vec![]);
        let corpus = Corpus::new(header, records.clone()).expect("valid random corpus");
        for q in 0..20 {
            let query: Vec<f64> = if q % 2 == 0 {
                records.choose(&mut rng).unwrap().embedding.clone()
            } else {
                (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect()
            };
            let mut filter = SearchFilter::tier(Tier::Full);
            if rng.random_bool(0.3) {
                filter = filter.with_categories(
                    categories
                        .iter()
                        .copied()
                        .filter(|_| rng.random_bool(0.6))
                        .chain(["a"]),
                );
            }
            if rng.random_bool(0.3) {
                filter = filter.excluding(records.choose(&mut rng).unwrap().id.clone());
            }
            let k = rng.random_range(1..=n.min(120));
            let got = search(&corpus, &query, &filter, k).expect("search");
            let want = brute_force(&records, &query, &filter, k);
            let same = got.len() == want.len()
                && got
                    .iter()
                    .zip(&want)
                    .all(|(g, (id, d))| &g.image_id == id && g.distance == *d);
            if !same {
                mismatches += 1;
            }
            queries += 1;
        }
    }
    let elapsed = start.elapsed();
    Verdict::new(
        mismatches == 0 && elapsed < Duration::from_secs(10),
        format!(
            "k-NN exactness: {}/{queries} queries over 50 corpora match brute force; {} (limit 10 s)",
            queries - mismatches,
            secs(elapsed)
        ),
    )
}

// 2. composition algebra over randomized states

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn random_registry(rng: &mut ChaCha8Rng, concepts: &[String], dim: usize) -> CavRegistry {
    concepts
        .iter()
        .map(|name| ConceptVector {
            name: name.clone(),
            direction: unit(rng, dim),
            n_positive: 0,
            n_negative: 0,
            negative_mode: NegativeMode::Random,
            seed: 0,
            hyperparameters: TrainerConfig::default(),
        })
        .collect()
}

fn random_pins(rng: &mut ChaCha8Rng, corpus: &Corpus) -> Vec<String> {
    let tier = *Tier::ALL.choose(rng).unwrap();
    let pool: Vec<&ImageRecord> = corpus.tier_records(tier).collect();
    let n = rng.random_range(1..=3);
    (0..n)
        .map(|_| pool.choose(rng).unwrap().id.clone())
        .collect()
}

fn random_crop(rng: &mut ChaCha8Rng, corpus: &Corpus, base: &str) -> refineir::SnappedCrop {
    let children: Vec<&ImageRecord> = corpus.crop_children(base).collect();
    let region = children.choose(rng).unwrap().region.unwrap();
    snap_crop(corpus, base, region).unwrap()
}

/// What a random refinement changed, so it can be undone.
enum Step {
    Slider(String, f64),
    Pins(Vec<String>),
    Crop,
    Filter(Option<BTreeSet<String>>),
}

fn random_step(
    rng: &mut ChaCha8Rng,
    st: &mut QueryState,
    corpus: &Corpus,
    reg: &CavRegistry,
    concepts: &[String],
) -> Step {
    match rng.random_range(0..4) {
        0 => {
            let c = concepts.choose(rng).unwrap().clone();
            let prev = st.slider(&c);
            st.set_slider(reg, &c, rng.random_range(-1.0..=1.0))
                .unwrap();
            Step::Slider(c, prev)
        }
        1 => {
            let prev = st.pinned_example_ids().to_vec();
            st.refine_by_example(corpus, &random_pins(rng, corpus))
                .unwrap();
            Step::Pins(prev)
        }
        2 => {
            let prev = st.category_filter().cloned();
            let cats: Vec<&str> = corpus
                .categories()
                .iter()
                .map(String::as_str)
                .filter(|_| rng.random_bool(0.5))
                .collect();
            st.set_category_filter(corpus, Some(cats)).unwrap();
            Step::Filter(prev)
        }
        _ => {
            let snapped = random_crop(rng, corpus, st.base_image_id());
            st.refine_by_region(corpus, &snapped).unwrap();
            Step::Crop
        }
    }
}

fn composition_algebra() -> Verdict {
    let synth = generate_corpus(&SyntheticSpec {
        n_full_images: 80,
        seed: 3,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let corpus = &synth.corpus;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let concepts = synth.spec.concept_names();
    let reg = random_registry(&mut rng, &concepts, corpus.dimension());
    let alpha = corpus.median_norm().unwrap();
    let fulls: Vec<&ImageRecord> = corpus.tier_records(Tier::Full).collect();
    let (mut zero_fail, mut linear_fail, mut pin_fail, mut back_fail) = (0, 0, 0, 0);
    let mut worst_linear: f64 = 0.0;

    for _ in 0..1000 {
        let base = fulls.choose(&mut rng).unwrap();
        let fresh = QueryState::new(corpus, &base.id).unwrap();
        let mut st = fresh.clone();

        // zero state, including sliders moved and returned to 0
        let mut zeroed = fresh.clone();
        for c in &concepts {
            zeroed
                .set_slider(&reg, c, rng.random_range(-1.0..=1.0))
                .unwrap();
        }
        for c in &concepts {
            zeroed.set_slider(&reg, c, 0.0).unwrap();
        }
        if fresh.compose(corpus, &reg).unwrap() != base.embedding
            || zeroed.compose(corpus, &reg).unwrap() != base.embedding
        {
            zero_fail += 1;
        }

        for _ in 0..rng.random_range(0..6) {
            random_step(&mut rng, &mut st, corpus, &reg, &concepts);
        }

        // slider linearity
        let c = concepts.choose(&mut rng).unwrap();
        let s = rng.random_range(-1.0..=1.0);
        let mut at0 = st.clone();
        at0.set_slider(&reg, c, 0.0).unwrap();
        let mut at_s = st.clone();
        at_s.set_slider(&reg, c, s).unwrap();
        let (q0, qs) = (
            at0.compose(corpus, &reg).unwrap(),
            at_s.compose(corpus, &reg).unwrap(),
        );
        let v = &reg.get(c).unwrap().direction;
        let err = qs
            .iter()
            .zip(&q0)
            .zip(v)
            .map(|((a, b), vi)| ((a - b) - s * alpha * vi).abs())
            .fold(0.0, f64::max);
        worst_linear = worst_linear.max(err);
        if err > 1e-9 {
            linear_fail += 1;
        }

        // single pin with no sliders is that record's embedding
        let pin = random_pins(&mut rng, corpus).swap_remove(0);
        let mut pinned = st.clone();
        pinned.reset_sliders();
        pinned.refine_by_example(corpus, &[&pin]).unwrap();
        if pinned.compose(corpus, &reg).unwrap() != corpus.get_record(&pin).unwrap().embedding {
            pin_fail += 1;
        }

        // one refinement then its inverse restores state and query exactly
        let before = st.clone();
        let q_before = st.compose(corpus, &reg).unwrap();
        let prior_crop = st.active_crop().map(str::to_owned);
        let prior_pins = st.pinned_example_ids().to_vec();
        match random_step(&mut rng, &mut st, corpus, &reg, &concepts) {
            Step::Slider(c, prev) => st.set_slider(&reg, &c, prev).unwrap(),
            Step::Pins(prev) => st.refine_by_example(corpus, &prev).unwrap(),
            Step::Filter(prev) => st.set_category_filter(corpus, prev).unwrap(),
            Step::Crop => {
                match &prior_crop {
                    None => st.clear_crop(),
                    Some(id) => {
                        let region = corpus.get_record(id).unwrap().region.unwrap();
                        let snapped = snap_crop(corpus, st.base_image_id(), region).unwrap();
                        st.refine_by_region(corpus, &snapped).unwrap();
                    }
                }
                st.refine_by_example(corpus, &prior_pins).unwrap();
            }
        }
        if st != before || st.compose(corpus, &reg).unwrap() != q_before {
            back_fail += 1;
        }
    }
    let fails = zero_fail + linear_fail + pin_fail + back_fail;
    Verdict::new(
        fails == 0,
        format!(
            "composition algebra over 1000 states: zero-state {zero_fail} failures, linearity {linear_fail} (max err {worst_linear:.1e}), single pin {pin_fail}, backtrack {back_fail}"
        ),
    )
}

// 3. CAV recovery and gradient check

fn gradient_check(set: &LabeledSet, rng: &mut ChaCha8Rng, l2: f64) -> f64 {
    let d = set.dim();
    let w: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
    let b = rng.random_range(-0.5..0.5);
    let (gw, gb) = set.gradient(&w, b, l2);
    let h = 1e-5;
    let mut num = Vec::with_capacity(d + 1);
    for i in 0..=d {
        let (mut wp, mut wm, mut bp, mut bm) = (w.clone(), w.clone(), b, b);
        if i < d {
            wp[i] += h;
            wm[i] -= h;
        } else {
            bp += h;
            bm -= h;
        }
        num.push((set.loss(&wp, bp, l2) - set.loss(&wm, bm, l2)) / (2.0 * h));
    }
    let analytic: Vec<f64> = gw.into_iter().chain([gb]).collect();
    let diff: f64 = analytic
        .iter()
        .zip(&num)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    diff / dot(&analytic, &analytic).sqrt()
}

fn cav_recovery(synth: &SyntheticCorpus) -> Verdict {
    let start = Instant::now();
    let corpus = &synth.corpus;
    let hyper = TrainerConfig::default();
    let mut cosines = Vec::new();
    let mut counts_ok = true;
    for (i, concept) in synth.spec.concept_names().iter().enumerate() {
        let cav = train_random_cav(corpus, concept, Some(100), &hyper, i as u64).unwrap();
        counts_ok &= cav.n_positive == 100 && cav.n_negative == 100;
        cosines.push(cosine(&cav.direction, synth.direction(concept).unwrap()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_grad: f64 = 0.0;
    for concept in synth.spec.concept_names() {
        let pos: Vec<&[f64]> = labeled_positives(corpus, &concept)
            .iter()
            .take(100)
            .map(|r| r.embedding.as_slice())
            .collect();
        let neg: Vec<&[f64]> = unlabeled_for(corpus, &concept)
            .iter()
            .take(100)
            .map(|r| r.embedding.as_slice())
            .collect();
        let set = LabeledSet::new(&pos, &neg).unwrap();
        for _ in 0..3 {
            worst_grad = worst_grad.max(gradient_check(&set, &mut rng, hyper.l2));
        }
    }
    let elapsed = start.elapsed();
    let min_cos = cosines.iter().copied().fold(f64::INFINITY, f64::min);
    Verdict::new(
        counts_ok && min_cos >= 0.95 && worst_grad <= 1e-5 && elapsed < Duration::from_secs(30),
        format!(
            "CAV recovery: cos(V_c, u_c) = [{}] (min {min_cos:.4}, need >= 0.95); gradient rel. err {worst_grad:.1e} (need <= 1e-5); {} (limit 30 s)",
            cosines.iter().map(|c| format!("{c:.4}")).collect::<Vec<_>>().join(", "),
            secs(elapsed)
        ),
    )
}

// 4. stability curve

fn stability(synth: &SyntheticCorpus) -> Verdict {
    let ns = [5, 10, 20, 40, 80];
    let curve = stability_curve(
        &synth.corpus,
        "concept_1",
        &ns,
        20,
        &TrainerConfig::default(),
        0,
    )
    .unwrap();
    let medians: Vec<f64> = curve.points.iter().map(|p| p.median_cosine).collect();
    let at20 = curve.median_at(20).unwrap();
    let monotone = medians.windows(2).all(|w| w[0] <= w[1]);
    Verdict::new(
        at20 >= 0.9 && monotone,
        format!(
            "stability curve (concept_1, 20 trials): medians {} at n = 5,10,20,40,80; n=20 {at20:.4} (need >= 0.9), nondecreasing: {monotone}",
            medians.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(" ")
        ),
    )
}

// 5-7. tool evaluations

struct ToolRun {
    fraction: f64,
    off_tier: usize,
    elapsed: Duration,
}

fn eval_tool(synth: &SyntheticCorpus, tool: Tool, concept: &str) -> ToolRun {
    let start = Instant::now();
    let report = run_tool_eval(&synth.corpus, tool, &EvalConfig::new(concept, 100, 0)).unwrap();
    ToolRun {
        fraction: report.fraction_improved,
        off_tier: report.off_tier_results,
        elapsed: start.elapsed(),
    }
}

// 8. scripted HTTP session

async fn http(addr: SocketAddr, method: &str, path: &str, body: Option<&Value>) -> (u16, String) {
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    let payload = body.map(|b| b.to_string()).unwrap_or_default();
    let mut req = format!("{method} {path} HTTP/1.1\r\nhost: {addr}\r\nconnection: close\r\n");
    if body.is_some() {
        req.push_str(&format!(
            "content-type: application/json\r\ncontent-length: {}\r\n",
            payload.len()
        ));
    }
    req.push_str("\r\n");
    req.push_str(&payload);
    stream.write_all(req.as_bytes()).await.unwrap();
    let mut raw = Vec::new();
    stream.read_to_end(&mut raw).await.unwrap();
    let text = String::from_utf8(raw).unwrap();
    let (head, body) = text.split_once("\r\n\r\n").unwrap();
    let status = head.split(' ').nth(1).unwrap().parse().unwrap();
    (status, body.to_owned())
}

/// Runs the script against a fresh service; returns the transcript and page sizes seen.
async fn scripted_session(
    corpus: Corpus,
    registry: CavRegistry,
) -> (Vec<(u16, String)>, Vec<usize>) {
    let state = Arc::new(AppState::new(corpus, registry, Config::default()).unwrap());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let server = tokio::spawn(async move { axum::serve(listener, router(state)).await });

    let mut log = Vec::new();
    let mut sizes = Vec::new();
    let page_of = |body: &str| -> Vec<String> {
        let v: Value = serde_json::from_str(body).unwrap();
        v["results"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| r["image_id"].as_str().unwrap().to_owned())
            .collect()
    };

    let created = http(
        addr,
        "POST",
        "/v1/sessions",
        Some(&json!({"base_image_id": "img_00042"})),
    )
    .await;
    let sid = serde_json::from_str::<Value>(&created.1).unwrap()["session_id"]
        .as_str()
        .unwrap()
        .to_owned();
    log.push(created);
    let results = format!("/v1/sessions/{sid}/results?page=0");

    let r = http(addr, "GET", &results, None).await;
    sizes.push(page_of(&r.1).len());
    log.push(r);
    log.push(
        http(
            addr,
            "POST",
            &format!("/v1/sessions/{sid}/crop"),
            Some(&json!({"x": 20, "y": 30, "w": 140, "h": 120})),
        )
        .await,
    );
    let r = http(addr, "GET", &results, None).await;
    let cropped = page_of(&r.1);
    sizes.push(cropped.len());
    log.push(r);
    log.push(
        http(
            addr,
            "PUT",
            &format!("/v1/sessions/{sid}/pins"),
            Some(&json!({"ids": &cropped[..2]})),
        )
        .await,
    );
    let r = http(addr, "GET", &results, None).await;
    sizes.push(page_of(&r.1).len());
    log.push(r);
    log.push(
        http(
            addr,
            "PATCH",
            &format!("/v1/sessions/{sid}/sliders"),
            Some(&json!({"concept": "concept_1", "value": 0.5})),
        )
        .await,
    );
    for p in 0..2 {
        let r = http(
            addr,
            "GET",
            &format!("/v1/sessions/{sid}/results?page={p}&group_by_category=true&subgroups_k=2"),
            None,
        )
        .await;
        sizes.push(page_of(&r.1).len());
        log.push(r);
    }
    log.push(http(addr, "GET", &format!("/v1/sessions/{sid}/scatter"), None).await);
    log.push(http(addr, "GET", &format!("/v1/sessions/{sid}"), None).await);
    server.abort();
    (log, sizes)
}

fn service_contract(synth: &SyntheticCorpus) -> Verdict {
    let cav = train_random_cav(
        &synth.corpus,
        "concept_1",
        Some(100),
        &TrainerConfig::default(),
        0,
    )
    .unwrap();
    let registry: CavRegistry = [cav].into_iter().collect();
    let rt = tokio::runtime::Runtime::new().unwrap();
    let (a, sizes_a) = rt.block_on(scripted_session(synth.corpus.clone(), registry.clone()));
    let (b, _) = rt.block_on(scripted_session(synth.corpus.clone(), registry));
    let statuses: Vec<u16> = a.iter().map(|(s, _)| *s).collect();
    let expected_status = [201, 200, 200, 200, 200, 200, 200, 200, 200, 200, 200];
    let pages_ok = sizes_a.iter().all(|&n| n == 15);
    let stable = a == b;
    let bytes: usize = a.iter().map(|(_, body)| body.len()).sum();
    Verdict::new(
        pages_ok && stable && statuses == expected_status,
        format!(
            "service contract: create/crop/pin/slider/results over HTTP; page sizes {sizes_a:?}; statuses ok: {}; {} requests ({bytes} body bytes) byte-identical across two fresh services: {stable}",
            statuses == expected_status,
            a.len()
        ),
    )
}

fn main() {
    let start = Instant::now();
    let synth = generate_corpus(&SyntheticSpec::default()).expect("default synthetic corpus");
    let mut results: Vec<(usize, Verdict)> = Vec::new();
    let mut record = |n: usize, f: &dyn Fn() -> Verdict| {
        let verdict = catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|e| Verdict::new(false, format!("panicked: {}", panic_message(&e))));
        println!(
            "[{}] criterion {n}: {}",
            if verdict.pass { "PASS" } else { "FAIL" },
            verdict.detail
        );
        results.push((n, verdict));
    };

    record(1, &knn_exactness);
    record(2, &composition_algebra);
    record(3, &|| cav_recovery(&synth));
    record(4, &|| stability(&synth));

    let runs: BTreeMap<&str, ToolRun> = [
        ("concept", eval_tool(&synth, Tool::Concept, "concept_1")),
        ("example", eval_tool(&synth, Tool::Example, "concept_1")),
        ("region", eval_tool(&synth, Tool::Region, "concept_3")),
    ]
    .into_iter()
    .collect();
    let limit = Duration::from_secs(60);
    let (c, e, r) = (&runs["concept"], &runs["example"], &runs["region"]);
    record(5, &|| {
        Verdict::new(
            c.fraction >= 0.95 && c.elapsed < limit,
            format!(
                "refine-by-concept: {:.3} of 100 queries improved (need >= 0.95); {}",
                c.fraction,
                secs(c.elapsed)
            ),
        )
    });
    record(6, &|| {
        Verdict::new(
            e.fraction >= 0.75 && r.fraction >= 0.8 && r.off_tier == 0 && e.elapsed < limit && r.elapsed < limit,
            format!(
                "refine-by-example: {:.3} improved (need >= 0.75), {}; refine-by-region: {:.3} improved (need >= 0.8), {} off-tier results, {} (limit 60 s each)",
                e.fraction,
                secs(e.elapsed),
                r.fraction,
                r.off_tier,
                secs(r.elapsed)
            ),
        )
    });
    record(7, &|| {
        Verdict::new(
            c.fraction >= e.fraction,
            format!(
                "tool ordering: CONCEPT {:.3} >= EXAMPLE {:.3}",
                c.fraction, e.fraction
            ),
        )
    });
    record(8, &|| service_contract(&synth));

    let passed = results.iter().filter(|(_, v)| v.pass).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {}",
        results.len(),
        secs(start.elapsed())
    );
    if passed != results.len() {
        std::process::exit(1);
    }
}

fn panic_message(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| e.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}
