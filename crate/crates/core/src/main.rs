//! Command-line surface: dataset preparation, training, encoding, search,
//! the benchmark sweep, the geometry lab and weight-projection export.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use spherecode::codec::{search as code_search, DistanceMode, QueryRepr};
use spherecode::config::AppConfig;
use spherecode::error::{Error, Result};
use spherecode::eval::{export_weight_projections, run_benchmark, BenchInputs};
use spherecode::geometry::{pairwise_histogram, sample_points, Shape};
use spherecode::io::{read_code_db, read_fvecs, write_code_db, write_ivecs, NeighbourTable};
use spherecode::network::{
    embed_set, encode_set, load_checkpoint, soft_code_set, CatalyserConfig, Checkpoint,
    ModelParams,
};
use spherecode::pipeline::{load_prepared, prepare, prepare_if_needed, write_prepared};
use spherecode::training::{train, TrainConfig};

#[derive(Parser)]
#[command(name = "spherecode", about = "Trainable semantic hashing on products of spheres")]
struct Cli {
    /// Overrides the seed from the configuration file
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Configuration file (TOML); defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or load vectors, split them and build ground truth
    Prepare {
        /// Output directory (defaults to the configured one)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the proposed model on prepared splits
    Train {
        /// Directory holding prepared splits (defaults to the configured one)
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Bit budget; picks (M, K) from the configured grid
        #[arg(long, default_value_t = 16)]
        bits: usize,
    },
    /// Encode an .fvecs file into a packed code database
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scan a code database with queries from an .fvecs file
    Search {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        /// adc | symmetric
        #[arg(long, default_value = "adc")]
        mode: String,
        #[arg(long, default_value_t = 10)]
        top: usize,
        #[arg(long)]
        out: PathBuf,
        /// ivecs | csv
        #[arg(long, default_value = "ivecs")]
        format: String,
    },
    /// Full recall sweep across methods and bit budgets
    Bench {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pairwise-distance histograms on simplex / sphere / cube
    Geolab {
        /// simplex | sphere | cube
        #[arg(long)]
        shape: String,
        /// comma-separated dimensions, e.g. 4,16,64
        #[arg(long)]
        dims: String,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 64)]
        bins: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Project quantiser rows (and optionally an embedding sample) onto
    /// random axis pairs
    ExportWeights {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        sample: usize,
        /// optional .fvecs file embedded to produce the matching y sample
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<AppConfig> {
    let mut config = match &cli.config {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli)?;
    match cli.command {
        Command::Prepare { out } => {
            let dir = out.unwrap_or_else(|| config.output_dir.clone());
            let data = prepare(&config)?;
            write_prepared(&data, &dir)?;
            println!(
                "prepared {} train / {} query / {} database vectors in {}",
                data.train.count(),
                data.query.count(),
                data.database.count(),
                dir.display()
            );
        }
        Command::Train { data, out, bits } => {
            let data_dir = data.unwrap_or_else(|| config.output_dir.clone());
            let out_dir = out.unwrap_or_else(|| config.output_dir.clone());
            std::fs::create_dir_all(&out_dir)?;
            let prepared = load_prepared(&data_dir)?;
            let options = config.bench_options()?;
            let (m, k) = options.grid_for(bits)?;
            let net_config = CatalyserConfig {
                d_in: prepared.train.dim(),
                hidden: config.model.hidden,
                hidden_layers: config.model.hidden_layers,
                m,
                k,
            };
            let params = ModelParams::init(net_config, config.seed)?;
            let mut ckpt = Checkpoint::fresh(params, config.adam());
            let tconfig: TrainConfig = config.train_config()?;
            let report = train(
                &mut ckpt,
                &prepared.train,
                &prepared.train_neighbours,
                &tconfig,
                &out_dir.join(format!("proposed_{bits}.ckpt")),
                &out_dir.join(format!("proposed_{bits}_train.csv")),
            )?;
            println!(
                "trained {} steps over {} epochs; best validation recall {:?}",
                report.steps, report.epochs, report.best_val_recall
            );
        }
        Command::Encode { checkpoint, input, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let set = read_fvecs(&input)?;
            let codes = encode_set(&ckpt.params, &set)?;
            let db = spherecode::codec::CodeDatabase::from_codes(
                ckpt.params.config.m,
                ckpt.params.config.k,
                &codes,
            )?;
            write_code_db(&out, &db)?;
            println!("encoded {} vectors into {}", db.count(), out.display());
        }
        Command::Search { checkpoint, codes, queries, mode, top, out, format } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let db = read_code_db(&codes)?;
            let query_set = read_fvecs(&queries)?;
            let mode = match mode.as_str() {
                "adc" => DistanceMode::Adc,
                "symmetric" => DistanceMode::Symmetric,
                other => return Err(Error::Config(format!("unknown mode `{other}`"))),
            };
            let ranked: Vec<Vec<u32>> = match mode {
                DistanceMode::Adc => soft_code_set(&ckpt.params, &query_set)?
                    .into_iter()
                    .map(|y| code_search(&QueryRepr::Embedding(y), &db, top, mode))
                    .collect::<Result<_>>()?,
                DistanceMode::Symmetric => encode_set(&ckpt.params, &query_set)?
                    .into_iter()
                    .map(|c| code_search(&QueryRepr::Code(c), &db, top, mode))
                    .collect::<Result<_>>()?,
            };
            match format.as_str() {
                "ivecs" => {
                    write_ivecs(&out, &NeighbourTable::new(top, ranked)?)?;
                }
                "csv" => {
                    use std::io::Write;
                    let mut w = std::io::BufWriter::new(std::fs::File::create(&out)?);
                    writeln!(w, "query,rank,index")?;
                    for (qi, row) in ranked.iter().enumerate() {
                        for (rank, idx) in row.iter().enumerate() {
                            writeln!(w, "{qi},{rank},{idx}")?;
                        }
                    }
                }
                other => return Err(Error::Config(format!("unknown format `{other}`"))),
            }
            println!("wrote top-{top} results for {} queries", query_set.count());
        }
        Command::Bench { out } => {
            let dir = out.unwrap_or_else(|| config.output_dir.clone());
            std::fs::create_dir_all(&dir)?;
            let data = prepare_if_needed(&config, &dir)?;
            let options = config.bench_options()?;
            let inputs = BenchInputs {
                train: &data.train,
                query: &data.query,
                database: &data.database,
                gt: &data.gt,
                train_neighbours: &data.train_neighbours,
            };
            let report = run_benchmark(&inputs, &options, &dir)?;
            for cell in &report.cells {
                match &cell.error {
                    Some(e) => println!("{} @ {} bits: FAILED ({e})", cell.method.name(), cell.bits),
                    None => {
                        let recalls: Vec<String> = cell
                            .recalls
                            .iter()
                            .map(|(n, r)| format!("R@{n}={r:.4}"))
                            .collect();
                        println!(
                            "{} @ {} bits (M={}, K={}): {}",
                            cell.method.name(),
                            cell.bits,
                            cell.m,
                            cell.k,
                            recalls.join(" ")
                        );
                    }
                }
            }
            println!("report written to {}", dir.join("bench.csv").display());
        }
        Command::Geolab { shape, dims, samples, bins, out } => {
            let shape = Shape::parse(&shape)?;
            let dims: Vec<usize> = dims
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad dimension `{s}`")))
                })
                .collect::<Result<_>>()?;
            use std::io::Write;
            let mut w = std::io::BufWriter::new(std::fs::File::create(&out)?);
            writeln!(w, "shape,n,bin_low,bin_high,mass")?;
            for &n in &dims {
                let points = sample_points(shape, n, samples, config.seed)?;
                let hist = pairwise_histogram(&points, bins, shape.max_distance(n), config.seed)?;
                for b in 0..bins {
                    writeln!(
                        w,
                        "{},{n},{},{},{}",
                        match shape {
                            Shape::Simplex => "simplex",
                            Shape::Sphere => "sphere",
                            Shape::Cube => "cube",
                        },
                        hist.edges[b],
                        hist.edges[b + 1],
                        hist.masses[b]
                    )?;
                }
                println!(
                    "{shape:?} n={n}: mean pairwise distance {:.6}, variance {:.6}",
                    hist.mean, hist.variance
                );
            }
        }
        Command::ExportWeights { checkpoint, out, sample, data } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let y_sample = match data {
                Some(path) => {
                    let set = read_fvecs(&path)?;
                    Some(embed_set(&ckpt.params, &set)?)
                }
                None => None,
            };
            export_weight_projections(
                &ckpt.params,
                y_sample.as_deref(),
                sample,
                config.seed,
                &out,
            )?;
            println!("wrote weight projections to {}", out.display());
        }
    }
    Ok(())
}
