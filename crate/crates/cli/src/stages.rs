use std::time::Duration;

use conv2query::corpus::{self, TaskSetting};
use conv2query::evalkit::{self, Qrels};
use conv2query::lexindex::{Bm25Params, InvertedIndex};
use conv2query::pipeline::{self, MappingRecord, QuerySource};
use conv2query::qfilter::{self, Bm25Scorer, FilterMode, RerankerClient};
use conv2query::qgen::{self, GenBackend, GenConfig};
use conv2query::records::write_text;
use conv2query::service::ServiceClient;
use conv2query::textwin::{self, WindowConfig};
use conv2query::traindata::{self, EmptyPoolPolicy, PromptTemplate, TripleConfig};
use conv2query::{Error, Result};
use rayon::prelude::*;

use crate::meta::StageMeta;
use crate::*;

pub fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads;
    match cli.command {
        Command::Index(a) => index(a),
        Command::Gen(a) => gen(a, threads),
        Command::Filter(a) => filter(a),
        Command::BuildTrain(a) => build_train(a),
        Command::Retrieve(a) => retrieve(a, threads),
        Command::Eval(a) => eval(a),
        Command::Baseline(a) => baseline(a),
        Command::Qrels(a) => qrels(a),
    }
}

impl Bm25Args {
    fn params(&self) -> Result<Bm25Params> {
        let base = Bm25Params::profile(&self.profile)?;
        Bm25Params::new(self.k1.unwrap_or(base.k1), self.b.unwrap_or(base.b))
    }

    fn record(&self, meta: &mut StageMeta) -> Result<Bm25Params> {
        let params = self.params()?;
        meta.profile(&self.profile, &params);
        Ok(params)
    }
}

fn setting(s: &str) -> Result<TaskSetting> {
    s.parse()
}

fn endpoint<'a>(endpoint: &'a Option<String>, what: &str) -> Result<&'a str> {
    endpoint
        .as_deref()
        .ok_or_else(|| Error::validation(format!("{what} requires --endpoint")))
}

fn client(endpoint: &str, timeout: u64) -> ServiceClient {
    ServiceClient::with_timeout(endpoint, Duration::from_secs(timeout.max(1)))
}

fn in_flight(requested: usize, threads: Option<usize>) -> usize {
    threads.map_or(requested, |t| requested.min(t)).max(1)
}

fn index(a: IndexArgs) -> Result<()> {
    let mut meta = StageMeta::new("index");
    a.bm25.record(&mut meta)?;
    meta.input("corpus", &a.corpus)?;
    let corpus = corpus::load_corpus(&a.corpus)?;
    let idx = InvertedIndex::build(&corpus)?;
    meta.setting("documents", idx.doc_count());
    idx.save(&a.out)?;
    meta.write_for(&a.out)?;
    log::info!("indexed {} documents into {}", idx.doc_count(), a.out.display());
    Ok(())
}

fn gen(a: GenArgs, threads: Option<usize>) -> Result<()> {
    let mut meta = StageMeta::new("gen");
    meta.input("conversations", &a.conversations)?
        .input("corpus", &a.corpus)?
        .input("index", &a.index)?;
    meta.seed("gen", a.seed);
    let backend = match a.backend {
        Backend::Builtin => GenBackend::Builtin,
        Backend::Service => GenBackend::ExternalService(endpoint(&a.endpoint, "--backend service")?.to_string()),
    };
    let cfg = GenConfig {
        n: a.n,
        top_k: a.top_k,
        seed: a.seed,
        max_query_terms: a.max_query_terms,
        backend,
        max_in_flight: in_flight(a.max_in_flight, threads),
        request_timeout: Duration::from_secs(a.timeout.max(1)),
    };
    cfg.validate()?;
    meta.setting("n", a.n)
        .setting("top_k", a.top_k)
        .setting("max_query_terms", a.max_query_terms)
        .setting("backend", format!("{:?}", cfg.backend));
    let convs = corpus::load_conversations(&a.conversations)?;
    let docs = corpus::load_corpus(&a.corpus)?;
    let idx = InvertedIndex::load_for_corpus(&a.index, &docs)?;
    let sets = qgen::generate_for_judged_turns(&convs, &docs, &idx, &cfg)?;
    qgen::write_candidates(&a.out, &sets)?;
    meta.write_for(&a.out)?;
    log::info!("wrote {} candidate sets", sets.len());
    Ok(())
}

fn filter(a: FilterArgs) -> Result<()> {
    let mut meta = StageMeta::new("filter");
    let setting = setting(&a.setting)?;
    let mode = a.mode.parse::<FilterMode>().or_else(|_| FilterMode::parse(&a.mode, a.seed))?;
    if let FilterMode::Random(seed) = mode {
        meta.seed("filter", seed);
    }
    meta.setting("setting", setting.as_str())
        .setting("mode", mode.to_string())
        .setting("normalize", a.normalize)
        .setting("scorer", format!("{:?}", a.scorer).to_lowercase());
    meta.input("candidates", &a.candidates)?
        .input("conversations", &a.conversations)?
        .input("corpus", &a.corpus)?;
    let sets = qgen::load_candidates(&a.candidates)?;
    let convs = corpus::load_conversations(&a.conversations)?;
    let docs = corpus::load_corpus(&a.corpus)?;
    let results = match a.scorer {
        Scorer::Bm25 => {
            let path = a
                .index
                .as_ref()
                .ok_or_else(|| Error::validation("the bm25 scorer requires --index"))?;
            meta.input("index", path)?;
            let params = a.bm25.record(&mut meta)?;
            let idx = InvertedIndex::load_for_corpus(path, &docs)?;
            let scorer = Bm25Scorer::new(&idx, params);
            qfilter::filter_all(&sets, &convs, &docs, &scorer, mode, setting, a.normalize)?
        }
        Scorer::Service => {
            let url = endpoint(&a.endpoint, "--scorer service")?;
            meta.setting("endpoint", url);
            let scorer = RerankerClient::new(client(url, a.timeout));
            qfilter::filter_all(&sets, &convs, &docs, &scorer, mode, setting, a.normalize)?
        }
    };
    qfilter::write_filter_results(&a.out, &results)?;
    meta.write_for(&a.out)?;
    log::info!("filtered {} candidate sets with {mode}", results.len());
    Ok(())
}

fn build_train(a: BuildTrainArgs) -> Result<()> {
    let mut meta = StageMeta::new("build-train");
    let setting = setting(&a.setting)?;
    meta.setting("setting", setting.as_str());
    meta.input("conversations", &a.conversations)?
        .input("filtered", &a.filtered)?;
    let convs = corpus::load_conversations(&a.conversations)?;
    let results = qfilter::load_filter_results(&a.filtered)?;
    let pairs = traindata::build_pairs(&convs, &results, setting)?;

    let mut triples = None;
    if let Some(out) = &a.triples_out {
        let path = a
            .index
            .as_ref()
            .ok_or_else(|| Error::validation("--triples-out requires --index"))?;
        meta.input("index", path)?;
        let params = a.bm25.record(&mut meta)?;
        meta.seed("negatives", a.seed).setting("negatives", a.negatives);
        let idx = InvertedIndex::load(path)?;
        let cfg = TripleConfig {
            params,
            negatives: a.negatives,
            seed: a.seed,
            on_empty_pool: match a.on_empty_pool {
                OnEmptyPool::Fail => EmptyPoolPolicy::Fail,
                OnEmptyPool::Skip => EmptyPoolPolicy::Skip,
            },
        };
        let (t, skipped) = traindata::build_triples(&convs, &pairs.pairs, &idx, &cfg)?;
        if !skipped.is_empty() {
            log::warn!("{} turn(s) had no hard negatives and were skipped", skipped.len());
        }
        meta.setting("skipped", &skipped);
        triples = Some((out, t));
    }

    traindata::export_pairs(&a.out, &pairs.pairs)?;
    meta.write_for(&a.out)?;
    if let Some((out, t)) = triples {
        traindata::export_triples(out, &t)?;
        meta.write_for(out)?;
        log::info!("wrote {} triples", t.len());
    }
    log::info!("wrote {} training pairs", pairs.pairs.len());
    Ok(())
}

fn retrieve(a: RetrieveArgs, threads: Option<usize>) -> Result<()> {
    let mut meta = StageMeta::new("retrieve");
    let setting = setting(&a.setting)?;
    let params = a.bm25.record(&mut meta)?;
    meta.setting("setting", setting.as_str())
        .setting("k", a.k)
        .setting("tag", &a.tag)
        .setting("source", format!("{:?}", a.source).to_lowercase());
    meta.input("conversations", &a.conversations)?
        .input("index", &a.index)?;
    let source = match a.source {
        Source::Raw => QuerySource::RawContext,
        Source::Mapping => {
            let path = a
                .mapping
                .as_ref()
                .ok_or_else(|| Error::validation("--source mapping requires --mapping"))?;
            meta.input("mapping", path)?;
            QuerySource::Mapping(pipeline::load_mapping(path)?)
        }
        Source::Service => {
            let url = endpoint(&a.endpoint, "--source service")?;
            meta.setting("endpoint", url);
            QuerySource::Service {
                client: client(url, a.timeout),
                template: PromptTemplate::for_setting(setting),
                max_in_flight: in_flight(a.max_in_flight, threads),
            }
        }
    };
    let convs = corpus::load_conversations(&a.conversations)?;
    let idx = InvertedIndex::load(&a.index)?;
    let run = pipeline::run_retrieval(&convs, &idx, &params, setting, &source, a.k, &a.tag)?;
    pipeline::write_run(&a.out, &run)?;
    meta.write_for(&a.out)?;
    log::info!("retrieved for {} qids", run.len());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut meta = StageMeta::new("eval");
    meta.input("run", &a.run)?.input("qrels", &a.qrels)?;
    let metrics = evalkit::parse_metrics(&a.metrics)?;
    if metrics.is_empty() {
        return Err(Error::validation("--metrics is empty"));
    }
    meta.setting("metrics", &a.metrics);
    let run = pipeline::read_run(&a.run)?;
    let qrels = Qrels::load(&a.qrels)?;
    let report = evalkit::evaluate(&run, &qrels, &metrics)?;
    for q in &report.missing_run_qids {
        log::warn!("judged qid {q} is missing from the run");
    }
    let text = match a.format {
        Format::Table => report.to_table(),
        Format::Jsonl => report.to_jsonl(),
    };
    match &a.out {
        Some(out) => {
            write_text(out, &text)?;
            meta.write_for(out)?;
        }
        None => {
            eprintln!("{}", meta.header_line());
            print!("{text}");
        }
    }
    Ok(())
}

fn baseline(a: BaselineArgs) -> Result<()> {
    let mut meta = StageMeta::new("baseline");
    let setting = setting(&a.setting)?;
    let params = a.bm25.record(&mut meta)?;
    let cfg = WindowConfig {
        window_size: a.window_size,
        stride: a.stride,
        nqc_depth: a.nqc_depth,
    };
    cfg.validate()?;
    meta.setting("setting", setting.as_str())
        .setting("window_size", a.window_size)
        .setting("stride", a.stride)
        .setting("nqc_depth", a.nqc_depth)
        .setting("k", a.k)
        .setting("tag", &a.tag);
    meta.input("conversations", &a.conversations)?
        .input("index", &a.index)?;
    let convs = corpus::load_conversations(&a.conversations)?;
    let idx = InvertedIndex::load(&a.index)?;
    let contexts = pipeline::resolve_queries(&convs, setting, &QuerySource::RawContext)?;
    let queries: Vec<(String, String)> = contexts
        .par_iter()
        .map(|(q, ctx)| (q.clone(), textwin::best_window_query(ctx, &idx, &params, &cfg)))
        .collect();
    let run = pipeline::retrieve_queries(&queries, &idx, &params, a.k, &a.tag)?;
    pipeline::write_run(&a.out, &run)?;
    meta.write_for(&a.out)?;
    if let Some(out) = &a.windows_out {
        let records: Vec<MappingRecord> = queries
            .into_iter()
            .map(|(qid, query)| MappingRecord { qid, query })
            .collect();
        pipeline::write_mapping(out, &records)?;
        meta.write_for(out)?;
    }
    Ok(())
}

fn qrels(a: QrelsArgs) -> Result<()> {
    let mut meta = StageMeta::new("qrels");
    meta.input("conversations", &a.conversations)?;
    let convs = corpus::load_conversations(&a.conversations)?;
    corpus::write_qrels(&a.out, &convs)?;
    meta.write_for(&a.out)?;
    Ok(())
}
