use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use choiceforest::analysis::{
    pnn_coleaf_frequency, pnn_distance_mc, ranking_recovery, recovery_params, root_split_gini,
    theoretical_gini, DistanceMode, RecoveryScheme,
};
use choiceforest::eval::{run_experiment, table_csv, ExperimentConfig};
use choiceforest::generators::{
    fixed_pool, simulate, simulate_prices, AssortmentSampler, ModelSpec,
};
use choiceforest::io;
use choiceforest::rng;
use choiceforest::transforms::{
    aggregate, apply_link, expand_aggregated, LinkFunction, LinkedForest, PriceModel,
};
use choiceforest::{
    validate_distribution, Assortment, Dataset, FeatureVector, Forest, ForestParams, LeafRule,
};

/// Random-forest estimation of discrete choice models.
#[derive(Parser)]
#[command(name = "choiceforest", version, about)]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true, env = "CHOICEFOREST_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a forest to a CSV file and write it as JSON
    Fit(FitArgs),
    /// Predict choice probabilities with a fitted forest
    Predict(PredictArgs),
    /// Mean decrease impurity of every input dimension
    Importance(ImportanceArgs),
    /// Write synthetic data drawn from a model spec
    Simulate(SimulateArgs),
    /// Run experiment configs and report RMSE per estimator
    Benchmark(BenchmarkArgs),
    /// Studies of the tree structure
    #[command(subcommand)]
    Analyze(Analyze),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    /// chosen,x1..xd
    Transactions,
    /// closure_1..closure_N,book_0..book_N
    Aggregated,
    /// chosen,price_1..price_N (inf = absent)
    Prices,
}

#[derive(Clone, Copy, ValueEnum)]
enum Link {
    Exp,
    Arctan,
}

impl From<Link> for LinkFunction {
    fn from(l: Link) -> Self {
        match l {
            Link::Exp => LinkFunction::Exp,
            Link::Arctan => LinkFunction::Arctan,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    /// Both children of a split keep at least --leaf-min samples
    Children,
    /// Nodes with at least --leaf-min samples are split
    Node,
}

#[derive(Args)]
struct ForestArgs {
    /// Number of trees B
    #[arg(long, default_value_t = 1000)]
    trees: usize,
    /// Sub-sample size z (default: number of transactions)
    #[arg(long)]
    subsample: Option<usize>,
    /// Draw sub-samples without replacement
    #[arg(long)]
    without_replacement: bool,
    /// Candidate dimensions per split m (default: ceil(sqrt(d)))
    #[arg(long)]
    mtry: Option<usize>,
    /// Terminal leaf size l
    #[arg(long, default_value_t = 50)]
    leaf_min: usize,
    /// What --leaf-min bounds
    #[arg(long, value_enum, default_value_t = Rule::Children)]
    leaf_rule: Rule,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ForestArgs {
    fn params(&self) -> ForestParams {
        ForestParams {
            n_trees: self.trees,
            subsample: self.subsample,
            with_replacement: !self.without_replacement,
            mtry: self.mtry,
            leaf_min: self.leaf_min,
            leaf_rule: match self.leaf_rule {
                Rule::Children => LeafRule::Children,
                Rule::Node => LeafRule::Node,
            },
            seed: self.seed,
            ..Default::default()
        }
    }
}

#[derive(Args)]
struct DataArgs {
    /// Input CSV
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Transactions)]
    format: Format,
    /// Trailing customer-feature columns in a transactions file
    #[arg(long, default_value_t = 0)]
    features: usize,
    /// Link applied to prices
    #[arg(long, value_enum, default_value_t = Link::Exp)]
    link: Link,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    forest: ForestArgs,
    /// Where to write the model JSON
    #[arg(long)]
    output: PathBuf,
    /// Add the fitting time in seconds to the summary
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Offered products, e.g. 1,3,4 (empty for none)
    #[arg(long, allow_hyphen_values = true, conflicts_with_all = ["prices", "x"])]
    assortment: Option<String>,
    /// One price per product, `inf` when absent
    #[arg(long, conflicts_with = "x")]
    prices: Option<String>,
    /// Raw input vector of the forest's dimension
    #[arg(long)]
    x: Option<String>,
    /// Customer features appended to the assortment
    #[arg(long)]
    customer: Option<String>,
}

#[derive(Args)]
struct ImportanceArgs {
    #[arg(long)]
    model: PathBuf,
    /// The training file the model was fitted on
    #[arg(long)]
    input: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// Model spec JSON (tagged by `type`)
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    transactions: usize,
    #[arg(long, value_enum, default_value_t = Format::Transactions)]
    format: Format,
    /// Draw assortments from a fixed pool of this many uniform assortments
    #[arg(long, conflicts_with = "offer_prob")]
    pool: Option<usize>,
    /// Offer each product independently with this probability
    #[arg(long)]
    offer_prob: Option<f64>,
    /// Transactions per aggregated record
    #[arg(long, default_value_t = 1)]
    level: usize,
    /// Prices are drawn from U[0, price_max] (MNL specs only)
    #[arg(long, default_value_t = 5.0)]
    price_max: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV (default: standard output)
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// An experiment config, or an array of them
    #[arg(long)]
    config: PathBuf,
    /// Also write a table with one row per config and one column per estimator
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Analyze {
    /// Co-leaf frequencies of training assortments with an unseen one
    Pnn {
        /// Binary transactions CSV
        #[arg(long)]
        input: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        assortment: String,
        #[arg(long, default_value_t = 1000)]
        trees: usize,
        #[arg(long)]
        mtry: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Monte Carlo of PNN distances in random training families
    Distance {
        #[arg(long)]
        products: usize,
        /// Training family size M
        #[arg(long)]
        family: usize,
        #[arg(long, default_value_t = 100_000)]
        reps: usize,
        #[arg(long, value_enum, default_value_t = Mode::MeanLargestBinary)]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Correct splits recovered from single-ranking data
    RankingRecovery {
        #[arg(long, default_value_t = 10)]
        products: usize,
        #[arg(long)]
        transactions: usize,
        #[arg(long, value_enum, default_value_t = Scheme::Uniform)]
        scheme: Scheme,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// First-split Gini index per product under a single ranking
    Gini {
        #[arg(long)]
        products: usize,
        /// Also measure it on this binary transactions CSV
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    MeanLargestBinary,
    AllPnnMax,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scheme {
    Uniform,
    Dirichlet,
    Occurrence,
}

/// What `fit` writes.
#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: Format,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    link: Option<LinkFunction>,
    forest: Forest,
}

enum Failure {
    Usage(String),
    Core(choiceforest::Error),
}

impl From<choiceforest::Error> for Failure {
    fn from(e: choiceforest::Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(e.into())
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn open(path: &Path) -> Outcome<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| {
        Failure::Core(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
    })
}

fn create(path: &Path) -> Outcome<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| {
        Failure::Core(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
    })
}

fn parse_list(what: &str, s: &str) -> Outcome<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            if t == "inf" {
                Ok(f64::INFINITY)
            } else {
                t.parse::<f64>()
                    .map_err(|_| Failure::Usage(format!("--{what}: cannot read `{t}` as a number")))
            }
        })
        .collect()
}

fn parse_products(s: &str) -> Outcome<Vec<usize>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<usize>().map_err(|_| {
                Failure::Usage(format!("--assortment: cannot read `{t}` as a product"))
            })
        })
        .collect()
}

fn print_json(v: &impl Serialize) -> Outcome<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

/// Reads a data file into the binary/continuous dataset the forest sees.
fn load(data: &DataArgs) -> Outcome<Dataset> {
    let r = open(&data.input)?;
    Ok(match data.format {
        Format::Transactions => io::read_transactions(r, data.features)?,
        Format::Aggregated => expand_aggregated(&io::read_aggregated(r)?)?,
        Format::Prices => io::read_prices(r)?.to_dataset(data.link.into())?,
    })
}

fn read_model(path: &Path) -> Outcome<ModelFile> {
    Ok(serde_json::from_reader(open(path)?)?)
}

fn fit(args: FitArgs) -> Outcome<()> {
    let data = load(&args.data)?;
    let start = Instant::now();
    let forest = Forest::fit(&data, &args.forest.params())?;
    let seconds = start.elapsed().as_secs_f64();
    let file = ModelFile {
        format: args.data.format,
        link: (args.data.format == Format::Prices).then(|| args.data.link.into()),
        forest,
    };
    let mut w = create(&args.output)?;
    serde_json::to_writer(&mut w, &file)?;
    w.flush()?;
    let p = &file.forest.params;
    let mut summary = json!({
        "transactions": data.len(),
        "products": data.n_products(),
        "features": data.n_features(),
        "trees": p.n_trees,
        "subsample": p.subsample,
        "mtry": p.mtry,
        "leaf_min": p.leaf_min,
        "seed": p.seed,
    });
    if args.timing {
        summary["seconds"] = json!(seconds);
    }
    print_json(&summary)
}

fn predict(args: PredictArgs) -> Outcome<()> {
    let m = read_model(&args.model)?;
    let f = &m.forest;
    let (dist, offered) = if let Some(prices) = &args.prices {
        let prices = parse_list("prices", prices)?;
        let link = m.link.unwrap_or_default();
        let x = apply_link(&prices, link)?;
        let offered = Assortment::from_presence(f.n_products, x.values())?;
        let model = LinkedForest {
            forest: m.forest.clone(),
            link,
        };
        (model.price_probabilities(&prices)?, offered)
    } else if let Some(x) = &args.x {
        let x = FeatureVector::new(parse_list("x", x)?)?;
        let offered = Assortment::from_presence(f.n_products, x.values())?;
        (f.predict_normalized_x(&x, Default::default())?, offered)
    } else {
        let products = parse_products(args.assortment.as_deref().unwrap_or(""))?;
        let s = Assortment::from_products(f.n_products, &products)?;
        let customer = args
            .customer
            .as_deref()
            .map(|c| parse_list("customer", c))
            .transpose()?;
        (f.predict_normalized(&s, customer.as_deref())?, s)
    };
    if !validate_distribution(&dist, &offered)? {
        return Err(choiceforest::Error::InvalidValue(
            "prediction is not a valid distribution".into(),
        )
        .into());
    }
    print_json(&json!({
        "offered": offered.products().collect::<Vec<_>>(),
        "probabilities": dist.probs(),
    }))
}

fn importance(args: ImportanceArgs) -> Outcome<()> {
    let m = read_model(&args.model)?;
    let data = load(&DataArgs {
        input: args.input,
        format: m.format,
        features: m.forest.n_features,
        link: match m.link.unwrap_or_default() {
            LinkFunction::Exp => Link::Exp,
            LinkFunction::Arctan => Link::Arctan,
        },
    })?;
    let mdi = m.forest.mdi(&data)?;
    let n = m.forest.n_products;
    let rows: Vec<Value> = mdi
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let name = if k < n {
                format!("product {}", k + 1)
            } else {
                format!("feature {}", k + 1 - n)
            };
            json!({"dim": k + 1, "name": name, "mdi": v})
        })
        .collect();
    print_json(&json!({ "importance": rows }))
}

fn simulate_cmd(args: SimulateArgs) -> Outcome<()> {
    let mut text = String::new();
    open(&args.spec)?.read_to_string(&mut text)?;
    let spec = ModelSpec::from_json(&text)?;
    let mut g = rng::stream(args.seed);
    let mut out: Vec<u8> = Vec::new();
    if args.format == Format::Prices {
        let ModelSpec::Mnl(mnl) = &spec else {
            return Err(Failure::Usage("--format prices needs an MNL spec".into()));
        };
        io::write_prices(
            &mut out,
            &simulate_prices(mnl, args.transactions, args.price_max, &mut g)?,
        )?;
    } else {
        let model = spec.as_model();
        let n = model.n_products();
        let base = match args.offer_prob {
            Some(p) => AssortmentSampler::bernoulli(p)?,
            None => AssortmentSampler::UniformNonEmpty,
        };
        let sampler = match args.pool {
            Some(k) => fixed_pool(n, k, &base, &mut g)?,
            None => base,
        };
        let data = simulate(model, &sampler, args.transactions, &mut g)?;
        match args.format {
            Format::Aggregated => io::write_aggregated(&mut out, &aggregate(&data, args.level)?)?,
            _ => io::write_transactions(&mut out, &data)?,
        }
    }
    match &args.output {
        Some(p) => {
            let mut w = create(p)?;
            w.write_all(&out)?;
            w.flush()?;
        }
        None => std::io::stdout().lock().write_all(&out)?,
    }
    Ok(())
}

fn benchmark(args: BenchmarkArgs) -> Outcome<()> {
    let value: Value = serde_json::from_reader(open(&args.config)?)?;
    let configs = match value {
        Value::Array(items) => items,
        v => vec![v],
    };
    let mut reports = Vec::with_capacity(configs.len());
    for (k, c) in configs.into_iter().enumerate() {
        let cfg = ExperimentConfig::from_json(&c.to_string()).map_err(|e| match e {
            choiceforest::Error::InvalidParameter(m) if k > 0 => {
                choiceforest::Error::InvalidParameter(format!("config [{k}]: {m}"))
            }
            e => e,
        })?;
        reports.push(run_experiment(&cfg)?);
    }
    if let Some(path) = &args.table {
        let mut w = create(path)?;
        w.write_all(table_csv(&reports)?.as_bytes())?;
        w.flush()?;
    }
    if reports.len() == 1 {
        print_json(&reports[0])
    } else {
        print_json(&reports)
    }
}

fn analyze(a: Analyze) -> Outcome<()> {
    match a {
        Analyze::Pnn {
            input,
            assortment,
            trees,
            mtry,
            seed,
        } => {
            let data = io::read_transactions(open(&input)?, 0)?;
            let s = Assortment::from_products(data.n_products(), &parse_products(&assortment)?)?;
            let params = ForestParams {
                n_trees: trees,
                mtry,
                leaf_min: 1,
                seed,
                ..Default::default()
            };
            let forest = Forest::fit(&data, &params)?;
            let report = pnn_coleaf_frequency(&forest, &s, &data)?;
            let co_leaf: Vec<Value> = report
                .co_leaf()
                .into_iter()
                .map(|(a, d, f)| {
                    json!({
                        "products": a.products().collect::<Vec<_>>(),
                        "distance": d,
                        "frequency": f,
                        "pnn": report.pnn.contains(&a),
                    })
                })
                .collect();
            let pnn: Vec<Vec<usize>> = report.pnn.iter().map(|a| a.products().collect()).collect();
            print_json(&json!({
                "target": s.products().collect::<Vec<_>>(),
                "pnn": pnn,
                "pnn_distance": report.pnn_distance,
                "co_leaf": co_leaf,
                "trees": report.n_trees,
            }))
        }
        Analyze::Distance {
            products,
            family,
            reps,
            mode,
            seed,
        } => {
            let mode = match mode {
                Mode::MeanLargestBinary => DistanceMode::MeanLargestBinary,
                Mode::AllPnnMax => DistanceMode::AllPnnMax,
            };
            print_json(&pnn_distance_mc(products, family, reps, seed, mode)?)
        }
        Analyze::RankingRecovery {
            products,
            transactions,
            scheme,
            reps,
            seed,
        } => {
            let scheme = match scheme {
                Scheme::Uniform => RecoveryScheme::Uniform,
                Scheme::Dirichlet => RecoveryScheme::Dirichlet,
                Scheme::Occurrence => RecoveryScheme::occurrence(),
            };
            let params = recovery_params(products, seed);
            print_json(&ranking_recovery(
                products,
                transactions,
                scheme,
                &params,
                reps,
                seed,
            )?)
        }
        Analyze::Gini { products, input } => {
            let theory = (1..=products)
                .map(|j| theoretical_gini(j, products))
                .collect::<choiceforest::Result<Vec<_>>>()?;
            let mut report = json!({ "products": products, "theoretical": theory });
            if let Some(path) = input {
                let data = io::read_transactions(open(&path)?, 0)?;
                if data.n_products() != products {
                    return Err(choiceforest::Error::DimensionMismatch {
                        expected: products,
                        found: data.n_products(),
                    }
                    .into());
                }
                let empirical: Vec<Value> = root_split_gini(&data)?
                    .into_iter()
                    .map(|g| if g.is_finite() { json!(g) } else { Value::Null })
                    .collect();
                report["empirical"] = json!(empirical);
            }
            print_json(&report)
        }
    }
}

fn error_json(e: &Failure) -> Value {
    match e {
        Failure::Usage(m) => json!({"error": "usage", "message": m}),
        Failure::Core(e) => {
            let kind = match e {
                choiceforest::Error::Parse { .. } => "parse",
                choiceforest::Error::Io(_) => "io",
                choiceforest::Error::Json(_) => "json",
                choiceforest::Error::Csv(_) => "csv",
                choiceforest::Error::DimensionMismatch { .. } => "dimension",
                choiceforest::Error::InvalidParameter(_) => "invalid-parameter",
                _ => "invalid-input",
            };
            let mut v = json!({"error": kind, "message": e.to_string()});
            if let choiceforest::Error::Parse { line, .. } = e {
                v["line"] = json!(line);
            }
            v
        }
    }
}

fn run(cli: Cli) -> Outcome<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Fit(a) => fit(a),
        Command::Predict(a) => predict(a),
        Command::Importance(a) => importance(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Benchmark(a) => benchmark(a),
        Command::Analyze(a) => analyze(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ")
                .to_string();
            eprintln!("{}", json!({"error": "usage", "message": first}));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            match e {
                Failure::Usage(_) => ExitCode::from(2),
                Failure::Core(_) => ExitCode::FAILURE,
            }
        }
    }
}
