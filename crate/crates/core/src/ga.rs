//! Genetic-algorithm search over the discrete (b, xi, m, s) grid.
//!
//! [`GaRun`] is a stepper: it hands out a population, takes one score per
//! member and evolves. [`run_ga`] drives it with a [`Fitness`] source; the
//! session service drives it directly from human judgments.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioBuffer, StftConfig};
use crate::enhance::SceParams;
use crate::error::{Error, Result};
use crate::metrics::{activity_mask, log_spectral_distance};
use crate::pipeline::{process, ProcessOptions, Stimulus};

/// Legal values of each parameter. Genomes index into these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGrid {
    pub b: Vec<f64>,
    pub xi: Vec<f64>,
    pub m: Vec<usize>,
    pub s: Vec<f64>,
}

fn steps(lo: f64, step: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + step * i as f64).collect()
}

impl ParamGrid {
    /// b 0.5..3 by 0.5, xi {0.8, 0.9}, m {5, 6}, s 1..5 by 0.5.
    pub fn experiment_one() -> Self {
        Self {
            b: steps(0.5, 0.5, 6),
            xi: vec![0.8, 0.9],
            m: vec![5, 6],
            s: steps(1.0, 0.5, 9),
        }
    }

    /// As [`ParamGrid::experiment_one`] with xi fixed at 0.9 and m at 5.
    pub fn experiment_two() -> Self {
        Self {
            xi: vec![0.9],
            m: vec![5],
            ..Self::experiment_one()
        }
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.b.len(), self.xi.len(), self.m.len(), self.s.len()]
    }

    pub fn size(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims().contains(&0) {
            return Err(Error::Config("every parameter grid needs at least one value".into()));
        }
        for g in self.all_genomes() {
            self.params(&g)?.validate()?;
        }
        Ok(())
    }

    pub fn contains(&self, g: &Genome) -> bool {
        g.genes().iter().zip(self.dims()).all(|(&i, d)| i < d)
    }

    pub fn params(&self, g: &Genome) -> Result<SceParams> {
        if !self.contains(g) {
            return Err(Error::Validation(format!("genome {g:?} is off the grid")));
        }
        Ok(SceParams {
            b: self.b[g.b],
            xi: self.xi[g.xi],
            m: self.m[g.m],
            s: self.s[g.s],
        })
    }

    pub fn all_genomes(&self) -> impl Iterator<Item = Genome> + '_ {
        let [nb, nx, nm, ns] = self.dims();
        (0..nb * nx * nm * ns).map(move |k| Genome {
            b: k / (nx * nm * ns),
            xi: k / (nm * ns) % nx,
            m: k / ns % nm,
            s: k % ns,
        })
    }
}

/// Grid indices for (b, xi, m, s).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Genome {
    pub b: usize,
    pub xi: usize,
    pub m: usize,
    pub s: usize,
}

impl Genome {
    pub fn genes(&self) -> [usize; 4] {
        [self.b, self.xi, self.m, self.s]
    }

    pub fn from_genes(g: [usize; 4]) -> Self {
        Self {
            b: g[0],
            xi: g[1],
            m: g[2],
            s: g[3],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaConfig {
    pub population_size: usize,
    pub elite_count: usize,
    /// Per-gene probability of moving to a neighboring grid value.
    pub mutation_rate: f64,
    pub max_generations: usize,
    /// Stop after this many consecutive generations with the same elite.
    pub convergence_patience: usize,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population_size: 8,
            elite_count: 1,
            mutation_rate: 0.1,
            max_generations: 15,
            convergence_patience: 5,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size < 4 {
            return Err(Error::Config("population_size must be >= 4".into()));
        }
        if self.elite_count >= self.population_size {
            return Err(Error::Config("elite_count must be below population_size".into()));
        }
        if !(0.0..=1.0).contains(&self.mutation_rate) {
            return Err(Error::Config("mutation_rate must lie in [0, 1]".into()));
        }
        if self.max_generations == 0 || self.convergence_patience == 0 {
            return Err(Error::Config(
                "max_generations and convergence_patience must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Uniform draw of distinct genomes.
pub fn init_population(cfg: &GaConfig, grid: &ParamGrid, rng: &mut impl Rng) -> Result<Vec<Genome>> {
    cfg.validate()?;
    grid.validate()?;
    if grid.size() < cfg.population_size {
        return Err(Error::Config(format!(
            "grid has {} points, population needs {} distinct genomes",
            grid.size(),
            cfg.population_size
        )));
    }
    let dims = grid.dims();
    let mut pop: Vec<Genome> = Vec::with_capacity(cfg.population_size);
    while pop.len() < cfg.population_size {
        let g = Genome::from_genes(dims.map(|d| rng.random_range(0..d)));
        if !pop.contains(&g) {
            pop.push(g);
        }
    }
    Ok(pop)
}

/// Indices sorted by descending score; ties keep population order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

fn tournament(scores: &[f64], rng: &mut impl Rng) -> usize {
    let a = rng.random_range(0..scores.len());
    let b = rng.random_range(0..scores.len());
    if scores[b] > scores[a] {
        b
    } else {
        a
    }
}

fn mutate(g: &mut [usize; 4], dims: [usize; 4], rate: f64, rng: &mut impl Rng) {
    for (gene, d) in g.iter_mut().zip(dims) {
        if d < 2 || !rng.random_bool(rate) {
            continue;
        }
        *gene = neighbor(*gene, d, rng);
    }
}

const MAX_DEDUP_STEPS: usize = 64;

fn step_random_gene(g: &mut [usize; 4], dims: [usize; 4], rng: &mut impl Rng) {
    let free: Vec<usize> = (0..4).filter(|&i| dims[i] > 1).collect();
    if free.is_empty() {
        return;
    }
    let i = free[rng.random_range(0..free.len())];
    g[i] = neighbor(g[i], dims[i], rng);
}

fn neighbor(gene: usize, d: usize, rng: &mut impl Rng) -> usize {
    if gene == 0 {
        1
    } else if gene == d - 1 {
        d - 2
    } else if rng.random_bool(0.5) {
        gene + 1
    } else {
        gene - 1
    }
}

/// Elitism, then tournament-of-2 parents, single-point crossover and
/// per-gene neighbor mutation for the remaining slots. A child that copies a
/// genome already placed in the next generation is stepped to a neighbor
/// until it is new.
pub fn evolve_generation(
    population: &[Genome],
    scores: &[f64],
    cfg: &GaConfig,
    grid: &ParamGrid,
    rng: &mut impl Rng,
) -> Result<Vec<Genome>> {
    evolve_avoiding(population, scores, cfg, grid, &HashSet::new(), rng)
}

/// [`evolve_generation`] that also steps children away from genomes in
/// `visited`, so evaluations go to unexplored grid points while any remain.
pub fn evolve_avoiding(
    population: &[Genome],
    scores: &[f64],
    cfg: &GaConfig,
    grid: &ParamGrid,
    visited: &HashSet<Genome>,
    rng: &mut impl Rng,
) -> Result<Vec<Genome>> {
    cfg.validate()?;
    if population.len() != scores.len() || population.is_empty() {
        return Err(Error::Validation(format!(
            "{} scores for {} genomes",
            scores.len(),
            population.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Validation("fitness scores must be finite".into()));
    }
    let dims = grid.dims();
    let mut next: Vec<Genome> = ranking(scores)
        .into_iter()
        .take(cfg.elite_count)
        .map(|i| population[i])
        .collect();
    while next.len() < cfg.population_size {
        let p1 = population[tournament(scores, rng)].genes();
        let p2 = population[tournament(scores, rng)].genes();
        let cut = rng.random_range(1..4);
        let mut child = p1;
        child[cut..].copy_from_slice(&p2[cut..]);
        mutate(&mut child, dims, cfg.mutation_rate, rng);
        let avoid_visited = visited.len() + next.len() < grid.size();
        let taken = |g: &Genome| next.contains(g) || (avoid_visited && visited.contains(g));
        if next.len() < grid.size() {
            let mut tries = 0;
            while taken(&Genome::from_genes(child)) && tries < MAX_DEDUP_STEPS {
                step_random_gene(&mut child, dims, rng);
                tries += 1;
            }
        }
        next.push(Genome::from_genes(child));
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub generation: usize,
    pub genomes: Vec<Genome>,
    pub scores: Vec<f64>,
    pub elite: Genome,
    pub elite_score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GaHistory {
    pub generations: Vec<GenerationRecord>,
}

impl GaHistory {
    /// `generation,best_score,mean_score,b,xi,m,s` (elite grid indices).
    pub fn convergence_csv(&self) -> String {
        let mut out = String::from("generation,best_score,mean_score,b,xi,m,s\n");
        for r in &self.generations {
            let mean = r.scores.iter().sum::<f64>() / r.scores.len() as f64;
            let e = r.elite;
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{},{},{},{}",
                r.generation, r.elite_score, mean, e.b, e.xi, e.m, e.s
            );
        }
        out
    }
}

/// GA state between evaluations.
#[derive(Debug, Clone)]
pub struct GaRun {
    cfg: GaConfig,
    grid: ParamGrid,
    rng: ChaCha8Rng,
    population: Vec<Genome>,
    history: GaHistory,
    visited: HashSet<Genome>,
    stale: usize,
    finished: bool,
}

impl GaRun {
    pub fn new(cfg: GaConfig, grid: ParamGrid) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let population = init_population(&cfg, &grid, &mut rng)?;
        Ok(Self {
            cfg,
            grid,
            rng,
            population,
            history: GaHistory::default(),
            visited: HashSet::new(),
            stale: 0,
            finished: false,
        })
    }

    pub fn config(&self) -> &GaConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &ParamGrid {
        &self.grid
    }

    /// Genomes awaiting scores.
    pub fn population(&self) -> &[Genome] {
        &self.population
    }

    /// Index of the generation awaiting scores.
    pub fn generation(&self) -> usize {
        self.history.generations.len()
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn history(&self) -> &GaHistory {
        &self.history
    }

    /// Elite of the last scored generation.
    pub fn best(&self) -> Option<(Genome, f64)> {
        self.history
            .generations
            .last()
            .map(|r| (r.elite, r.elite_score))
    }

    /// Records scores for the current population, then either finishes or
    /// evolves the next one.
    pub fn submit_scores(&mut self, scores: Vec<f64>) -> Result<()> {
        if self.finished {
            return Err(Error::State("GA run already finished".into()));
        }
        if scores.len() != self.population.len() {
            return Err(Error::Validation(format!(
                "{} scores for {} genomes",
                scores.len(),
                self.population.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Validation("fitness scores must be finite".into()));
        }
        let top = ranking(&scores)[0];
        let elite = self.population[top];
        match self.best() {
            Some((prev, _)) if prev == elite => self.stale += 1,
            _ => self.stale = 0,
        }
        self.history.generations.push(GenerationRecord {
            generation: self.generation(),
            genomes: self.population.clone(),
            scores: scores.clone(),
            elite,
            elite_score: scores[top],
        });
        if self.stale >= self.cfg.convergence_patience
            || self.generation() >= self.cfg.max_generations
        {
            self.finished = true;
        } else {
            self.visited.extend(self.population.iter().copied());
            self.population = evolve_avoiding(
                &self.population,
                &scores,
                &self.cfg,
                &self.grid,
                &self.visited,
                &mut self.rng,
            )?;
        }
        Ok(())
    }

    pub fn into_history(self) -> GaHistory {
        self.history
    }
}

/// Scores a whole population at once.
pub trait Fitness {
    fn evaluate(&mut self, genomes: &[Genome], grid: &ParamGrid) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaOutcome {
    pub best: Genome,
    pub best_score: f64,
    pub best_params: SceParams,
    pub history: GaHistory,
}

/// Evaluate/evolve until converged or out of generations. A fitness source
/// that reports [`Error::SessionTimeout`] ends the run with the history so
/// far attached to the error.
pub fn run_ga(fitness: &mut dyn Fitness, cfg: GaConfig, grid: ParamGrid) -> Result<GaOutcome> {
    let mut run = GaRun::new(cfg, grid)?;
    while !run.is_finished() {
        let scores = match fitness.evaluate(run.population(), run.grid()) {
            Ok(s) => s,
            Err(Error::SessionTimeout { .. }) => {
                return Err(Error::SessionTimeout {
                    history: Box::new(run.into_history()),
                })
            }
            Err(e) => return Err(e),
        };
        run.submit_scores(scores)?;
    }
    let (best, best_score) = run.best().expect("finished run has a generation");
    let best_params = run.grid().params(&best)?;
    Ok(GaOutcome {
        best,
        best_score,
        best_params,
        history: run.into_history(),
    })
}

/// `LSD(mixture, clean) - LSD(processed, clean)` over speech-active frames of
/// the clean signal. `processed` may be shorter than the others by less than
/// one frame (the resynthesis drops the incomplete tail); the comparison
/// then runs over its length.
pub fn lsd_fitness(
    processed: &AudioBuffer,
    clean: &AudioBuffer,
    mixture: &AudioBuffer,
    config: StftConfig,
) -> Result<f64> {
    if clean.len() != mixture.len() || clean.sample_rate_hz() != mixture.sample_rate_hz() {
        return Err(Error::Alignment(format!(
            "clean has {} samples, mixture {}",
            clean.len(),
            mixture.len()
        )));
    }
    let n = processed.len();
    if n > clean.len() || clean.len() - n >= config.frame_len {
        return Err(Error::Alignment(format!(
            "processed has {n} samples, reference {}",
            clean.len()
        )));
    }
    let clean = clean.truncated(n);
    let mixture = mixture.truncated(n);
    let mask = activity_mask(&clean, config)?;
    Ok(log_spectral_distance(&mixture, &clean, &mask, config)?
        - log_spectral_distance(processed, &clean, &mask, config)?)
}

/// Mean [`lsd_fitness`] over a set of stimuli with known clean targets.
/// Scores are cached per genome since processing is deterministic.
pub struct ObjectiveLsd {
    stimuli: Vec<Stimulus>,
    options: ProcessOptions,
    cache: HashMap<Genome, f64>,
}

impl ObjectiveLsd {
    pub fn new(stimuli: Vec<Stimulus>, options: ProcessOptions) -> Result<Self> {
        if stimuli.is_empty() {
            return Err(Error::Config("objective fitness needs at least one stimulus".into()));
        }
        if stimuli.iter().any(|s| s.target.is_none()) {
            return Err(Error::Config("objective fitness needs the clean target of every stimulus".into()));
        }
        Ok(Self {
            stimuli,
            options,
            cache: HashMap::new(),
        })
    }

    pub fn score(&mut self, genome: &Genome, grid: &ParamGrid) -> Result<f64> {
        if let Some(&v) = self.cache.get(genome) {
            return Ok(v);
        }
        let params = grid.params(genome)?;
        let mut total = 0.0;
        for st in &self.stimuli {
            let out = process(st, params, &self.options)?;
            let clean = st.target.as_ref().expect("checked in new");
            total += lsd_fitness(&out.audio, clean, &st.mixture, self.options.stft)?;
        }
        let v = total / self.stimuli.len() as f64;
        self.cache.insert(*genome, v);
        Ok(v)
    }
}

impl Fitness for ObjectiveLsd {
    fn evaluate(&mut self, genomes: &[Genome], grid: &ParamGrid) -> Result<Vec<f64>> {
        genomes.iter().map(|g| self.score(g, grid)).collect()
    }
}

/// One paired comparison: which of the two intervals was preferred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pairing {
    /// Genome presented first.
    pub first: Genome,
    pub second: Genome,
}

/// Round-robin paired comparisons among the distinct genomes of one
/// population. A genome's fitness is its number of wins.
#[derive(Debug, Clone)]
pub struct JudgmentRound {
    population: Vec<Genome>,
    pairs: Vec<Pairing>,
    winners: Vec<Option<Genome>>,
}

impl JudgmentRound {
    /// Pair order and presentation order within each pair are shuffled by `rng`.
    pub fn new(population: &[Genome], rng: &mut impl Rng) -> Self {
        let mut distinct: Vec<Genome> = Vec::new();
        for g in population {
            if !distinct.contains(g) {
                distinct.push(*g);
            }
        }
        let mut pairs = Vec::new();
        for i in 0..distinct.len() {
            for j in i + 1..distinct.len() {
                let (a, b) = if rng.random_bool(0.5) { (i, j) } else { (j, i) };
                pairs.push(Pairing {
                    first: distinct[a],
                    second: distinct[b],
                });
            }
        }
        pairs.shuffle(rng);
        let n = pairs.len();
        Self {
            population: population.to_vec(),
            pairs,
            winners: vec![None; n],
        }
    }

    pub fn pairs(&self) -> &[Pairing] {
        &self.pairs
    }

    /// First pair without a judgment.
    pub fn next_pending(&self) -> Option<usize> {
        self.winners.iter().position(Option::is_none)
    }

    pub fn answered(&self) -> usize {
        self.winners.iter().filter(|w| w.is_some()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.next_pending().is_none()
    }

    /// `first_wins` selects the first interval of pair `index`.
    pub fn record(&mut self, index: usize, first_wins: bool) -> Result<()> {
        let p = *self
            .pairs
            .get(index)
            .ok_or_else(|| Error::Validation(format!("no pair {index}")))?;
        self.winners[index] = Some(if first_wins { p.first } else { p.second });
        Ok(())
    }

    /// Wins for every population member (duplicates share a count).
    pub fn scores(&self) -> Result<Vec<f64>> {
        if !self.is_complete() {
            return Err(Error::State(format!(
                "{} of {} comparisons judged",
                self.answered(),
                self.pairs.len()
            )));
        }
        Ok(self
            .population
            .iter()
            .map(|g| self.winners.iter().filter(|w| **w == Some(*g)).count() as f64)
            .collect())
    }
}

/// Supplies a preference for one pair of processed stimuli.
pub trait Judge {
    /// True when the first interval is preferred. Returning
    /// [`Error::SessionTimeout`] abandons the run.
    fn prefer_first(&mut self, pair: &Pairing, grid: &ParamGrid) -> Result<bool>;
}

/// Round-robin judgments as a [`Fitness`] source.
pub struct PairwiseFitness<J> {
    judge: J,
    rng: ChaCha8Rng,
}

impl<J: Judge> PairwiseFitness<J> {
    pub fn new(judge: J, seed: u64) -> Self {
        Self {
            judge,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl<J: Judge> Fitness for PairwiseFitness<J> {
    fn evaluate(&mut self, genomes: &[Genome], grid: &ParamGrid) -> Result<Vec<f64>> {
        let mut round = JudgmentRound::new(genomes, &mut self.rng);
        while let Some(i) = round.next_pending() {
            let first = self.judge.prefer_first(&round.pairs()[i], grid)?;
            round.record(i, first)?;
        }
        round.scores()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Frozen;
    impl Fitness for Frozen {
        fn evaluate(&mut self, g: &[Genome], _: &ParamGrid) -> Result<Vec<f64>> {
            Ok(vec![1.0; g.len()])
        }
    }

    struct Distance(Genome);
    impl Fitness for Distance {
        fn evaluate(&mut self, g: &[Genome], _: &ParamGrid) -> Result<Vec<f64>> {
            Ok(g.iter()
                .map(|x| {
                    -x.genes()
                        .iter()
                        .zip(self.0.genes())
                        .map(|(a, b)| a.abs_diff(b) as f64)
                        .sum::<f64>()
                })
                .collect())
        }
    }

    #[test]
    fn grid_sizes() {
        assert_eq!(ParamGrid::experiment_one().dims(), [6, 2, 2, 9]);
        assert_eq!(ParamGrid::experiment_one().size(), 216);
        assert_eq!(ParamGrid::experiment_two().size(), 54);
        let g = ParamGrid::experiment_one();
        let all: Vec<Genome> = g.all_genomes().collect();
        assert_eq!(all.len(), 216);
        let mut sorted = all.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 216);
        assert_eq!(g.params(&Genome::from_genes([5, 1, 1, 8])).unwrap(), SceParams { b: 3.0, xi: 0.9, m: 6, s: 5.0 });
        assert!(g.params(&Genome::from_genes([6, 0, 0, 0])).is_err());
    }

    #[test]
    fn init_is_deterministic_and_distinct() {
        let cfg = GaConfig::default();
        let grid = ParamGrid::experiment_one();
        let a = init_population(&cfg, &grid, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = init_population(&cfg, &grid, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        let mut d = a.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 8);
    }

    #[test]
    fn experiment_two_varies_only_b_and_s() {
        let grid = ParamGrid::experiment_two();
        let pop = init_population(&GaConfig::default(), &grid, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(pop.iter().all(|g| g.xi == 0 && g.m == 0));
    }

    #[test]
    fn small_grid_rejected() {
        let grid = ParamGrid {
            b: vec![1.0],
            xi: vec![0.9],
            m: vec![5],
            s: vec![1.0, 2.0, 3.0],
        };
        let err = init_population(&GaConfig::default(), &grid, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        assert!(GaConfig { population_size: 3, ..Default::default() }.validate().is_err());
        assert!(GaConfig { elite_count: 8, ..Default::default() }.validate().is_err());
        assert!(GaConfig::default().validate().is_ok());
    }

    #[test]
    fn frozen_fitness_stops_after_patience() {
        let cfg = GaConfig { convergence_patience: 3, ..Default::default() };
        let out = run_ga(&mut Frozen, cfg, ParamGrid::experiment_one()).unwrap();
        assert_eq!(out.history.generations.len(), 1 + 3);
    }

    #[test]
    fn elite_survives() {
        let grid = ParamGrid::experiment_one();
        let cfg = GaConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pop = init_population(&cfg, &grid, &mut rng).unwrap();
        let star = pop[3];
        for _ in 0..5 {
            let scores: Vec<f64> = pop.iter().map(|g| if *g == star { 10.0 } else { 0.0 }).collect();
            pop = evolve_generation(&pop, &scores, &cfg, &grid, &mut rng).unwrap();
            assert_eq!(pop[0], star);
            assert!(pop.iter().all(|g| grid.contains(g)));
        }
    }

    #[test]
    fn best_score_never_decreases() {
        let target = Genome::from_genes([2, 1, 0, 6]);
        let out = run_ga(&mut Distance(target), GaConfig { seed: 3, ..Default::default() }, ParamGrid::experiment_one()).unwrap();
        let best: Vec<f64> = out.history.generations.iter().map(|r| r.elite_score).collect();
        assert!(best.windows(2).all(|w| w[1] >= w[0]), "{best:?}");
        assert!(out.history.generations.len() <= 15);
    }

    #[test]
    fn same_seed_same_outcome() {
        let target = Genome::from_genes([4, 0, 1, 2]);
        let cfg = GaConfig { seed: 77, ..Default::default() };
        let a = run_ga(&mut Distance(target), cfg, ParamGrid::experiment_one()).unwrap();
        let b = run_ga(&mut Distance(target), cfg, ParamGrid::experiment_one()).unwrap();
        assert_eq!(a.history, b.history);
    }

    struct PreferGenome(Genome);
    impl Judge for PreferGenome {
        fn prefer_first(&mut self, p: &Pairing, _: &ParamGrid) -> Result<bool> {
            Ok(p.first == self.0 || (p.second != self.0 && p.first.s > p.second.s))
        }
    }

    #[test]
    fn pairwise_dominant_genome_wins() {
        let cfg = GaConfig { seed: 5, ..Default::default() };
        let grid = ParamGrid::experiment_one();
        let a = GaRun::new(cfg, grid.clone()).unwrap().population()[2];
        let out = run_ga(&mut PairwiseFitness::new(PreferGenome(a), 1), cfg, grid).unwrap();
        assert_eq!(out.best, a);
    }

    #[test]
    fn round_robin_counts() {
        let pop: Vec<Genome> = (0..4).map(|s| Genome::from_genes([0, 0, 0, s])).collect();
        let mut pop8 = pop.clone();
        pop8.push(pop[0]);
        let mut round = JudgmentRound::new(&pop8, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(round.pairs().len(), 6);
        assert!(round.scores().is_err());
        while let Some(i) = round.next_pending() {
            let p = round.pairs()[i];
            round.record(i, p.first.s > p.second.s).unwrap();
        }
        assert_eq!(round.scores().unwrap(), vec![0.0, 1.0, 2.0, 3.0, 0.0]);
    }

    struct Abandon(usize);
    impl Judge for Abandon {
        fn prefer_first(&mut self, _: &Pairing, _: &ParamGrid) -> Result<bool> {
            if self.0 == 0 {
                return Err(Error::SessionTimeout { history: Box::default() });
            }
            self.0 -= 1;
            Ok(true)
        }
    }

    #[test]
    fn timeout_keeps_partial_history() {
        // 28 judgments per generation with 8 distinct genomes
        let err = run_ga(&mut PairwiseFitness::new(Abandon(60), 0), GaConfig::default(), ParamGrid::experiment_one());
        match err {
            Err(Error::SessionTimeout { history }) => assert!(!history.generations.is_empty()),
            other => panic!("expected timeout, got {other:?}"),
        }
    }

    #[test]
    fn lsd_fitness_examples() {
        let cfg = StftConfig::default();
        let clean = crate::synth::speech_like(&crate::synth::SpeechLikeConfig::default(), 1).unwrap();
        let noise = crate::synth::white_noise(clean.len(), 16_000, 0.02, 2);
        let mix = AudioBuffer::new(
            clean.samples().iter().zip(noise.samples()).map(|(a, b)| a + b).collect(),
            16_000,
        )
        .unwrap();
        assert_eq!(lsd_fitness(&mix, &clean, &mix, cfg).unwrap(), 0.0);
        let v = lsd_fitness(&clean, &clean, &mix, cfg).unwrap();
        assert!(v > 0.0);
        let extra = crate::synth::white_noise(clean.len(), 16_000, 0.05, 3);
        let worse = AudioBuffer::new(
            mix.samples().iter().zip(extra.samples()).map(|(a, b)| a + b).collect(),
            16_000,
        )
        .unwrap();
        assert!(lsd_fitness(&worse, &clean, &mix, cfg).unwrap() < 0.0);
        assert!(matches!(
            lsd_fitness(&mix.truncated(clean.len() - 300), &clean, &mix, cfg),
            Err(Error::Alignment(_))
        ));
    }
}
