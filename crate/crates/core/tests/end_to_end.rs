use conv2query::corpus::{self, Conversation, Document, DocumentCorpus, TaskSetting, Utterance};
use conv2query::evalkit::{self, Metric, Qrels};
use conv2query::lexindex::{Bm25Params, InvertedIndex};
use conv2query::pipeline::{self, QuerySource};
use conv2query::qfilter::{self, Bm25Scorer, FilterMode};
use conv2query::qgen::{self, GenConfig};
use conv2query::traindata::{self, TripleConfig};

fn corpus() -> DocumentCorpus {
    DocumentCorpus::from_documents(vec![
        Document::new("oat", "Staffordshire oatcakes are savoury pancakes made from oatmeal, flour and yeast."),
        Document::new("pot", "The Potteries is the name for the six towns that make up Stoke-on-Trent."),
        Document::new("dog", "The Staffordshire Bull Terrier is a medium-sized, short-coated dog breed."),
        Document::new("mug", "Bone china mugs are still made in factories around Stoke."),
        Document::new("rail", "Stoke railway station sits on the West Coast Main Line."),
    ])
    .unwrap()
}

fn conversations() -> Vec<Conversation> {
    let u = |t: u32, s: &str, text: &str| Utterance {
        turn_index: t,
        speaker_id: s.into(),
        text: text.into(),
    };
    vec![
        Conversation::new(
            "trip",
            vec![
                u(1, "a", "We took the train up to Stoke for the weekend."),
                u(2, "b", "Did you visit any of the pottery towns?"),
                u(3, "a", "Yes, and we ate oatcakes with cheese for breakfast."),
            ],
        )
        .with_judgment(2, "pot", 2)
        .with_judgment(3, "oat", 1)
        .with_judgment(3, "mug", 0),
        Conversation::new(
            "pets",
            vec![
                u(1, "a", "My neighbour just got a new puppy."),
                u(2, "b", "What breed? I hear Staffies are lovely dogs."),
            ],
        )
        .with_judgment(2, "dog", 1),
    ]
}

#[test]
fn stages_chain_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);

    corpus::write_corpus(&p("docs.jsonl"), &corpus()).unwrap();
    corpus::write_conversations(&p("convs.jsonl"), &conversations()).unwrap();
    let docs = corpus::load_corpus(&p("docs.jsonl")).unwrap();
    let convs = corpus::load_conversations(&p("convs.jsonl")).unwrap();
    assert_eq!(convs, conversations());

    InvertedIndex::build(&docs).unwrap().save(&p("idx.bin")).unwrap();
    let index = InvertedIndex::load_for_corpus(&p("idx.bin"), &docs).unwrap();

    let cfg = GenConfig { n: 12, seed: 1, ..GenConfig::default() };
    let sets = qgen::generate_for_judged_turns(&convs, &docs, &index, &cfg).unwrap();
    assert_eq!(sets.len(), 3, "grade-0 judgments get no candidates");
    qgen::write_candidates(&p("cands.jsonl"), &sets).unwrap();
    let sets = qgen::load_candidates(&p("cands.jsonl")).unwrap();

    let scorer = Bm25Scorer::new(&index, Bm25Params::PROCIS);
    let results = qfilter::filter_all(&sets, &convs, &docs, &scorer, FilterMode::QfDc, TaskSetting::Contextualisation, false).unwrap();
    for r in &results {
        let best = r.candidates.iter().map(|c| c.s_agg).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(r.candidates[r.selected_index].s_agg, best);
    }
    qfilter::write_filter_results(&p("filtered.jsonl"), &results).unwrap();
    let results = qfilter::load_filter_results(&p("filtered.jsonl")).unwrap();

    let pairs = traindata::build_pairs(&convs, &results, TaskSetting::Contextualisation).unwrap();
    assert_eq!(pairs.judged_turns, 3);
    traindata::export_pairs(&p("pairs.jsonl"), &pairs.pairs).unwrap();

    let cfg = TripleConfig { params: Bm25Params::PROCIS, negatives: 2, seed: 0, on_empty_pool: Default::default() };
    let (triples, skipped) = traindata::build_triples(&convs, &pairs.pairs, &index, &cfg).unwrap();
    assert!(skipped.is_empty());
    assert_eq!(triples.len(), 3);
    for t in &triples {
        assert!(t.negatives.len() <= 2 && !t.negatives.contains(&t.positive));
    }

    let mapping = pipeline::load_mapping(&p("pairs.jsonl")).unwrap();
    let run = pipeline::run_retrieval(&convs, &index, &Bm25Params::PROCIS, TaskSetting::Contextualisation, &QuerySource::Mapping(mapping), 10, "c2q").unwrap();
    pipeline::write_run(&p("run.txt"), &run).unwrap();
    assert_eq!(pipeline::read_run(&p("run.txt")).unwrap().lists.len(), 3);

    corpus::write_qrels(&p("qrels.txt"), &convs).unwrap();
    let qrels = Qrels::load(&p("qrels.txt")).unwrap();
    let report = evalkit::evaluate(&pipeline::read_run(&p("run.txt")).unwrap(), &qrels, &[Metric::P1, Metric::Mrr(10), Metric::Npdcg(5)]).unwrap();
    for m in &report.metrics {
        assert!((0.0..=1.0).contains(&m.value), "{} = {}", m.metric, m.value);
    }
    // targets are built from the relevant documents' own terms
    assert_eq!(report.value("mrr10"), Some(1.0));
}

#[test]
fn anticipation_hides_the_current_turn() {
    let convs = conversations();
    let index = InvertedIndex::build(&corpus()).unwrap();
    let cc = pipeline::resolve_queries(&convs, TaskSetting::Contextualisation, &QuerySource::RawContext).unwrap();
    let ia = pipeline::resolve_queries(&convs, TaskSetting::Anticipation, &QuerySource::RawContext).unwrap();
    assert_eq!(cc.len(), ia.len());
    for ((q1, full), (q2, hist)) in cc.iter().zip(&ia) {
        assert_eq!(q1, q2);
        assert!(full.starts_with(hist.as_str()));
        assert!(full.len() > hist.len());
    }
    let run = pipeline::retrieve_queries(&ia, &index, &Bm25Params::WEBDISC_IA, 5, "ia").unwrap();
    assert_eq!(run.lists.len(), 3);
}
