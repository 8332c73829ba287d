use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use super::{ActionBuffer, BufferedAction, Clock, EpisodeLog, LoopConfig, StateBuffer, StepRecord, TimingStats};
use crate::envs::{EnvSpec, EnvState, Goal, Termination};
use crate::error::{Error, Result};
use crate::planner::{Dynamics, PlanResult, Planner, WarmStart};

use super::predict_future_state;

/// The plant as seen by the executor.
pub trait EnvHandle: Send {
    fn spec(&self) -> &EnvSpec;
    fn observe(&self) -> &EnvState;
    fn apply(&mut self, action: &[f64]) -> Result<()>;
}

/// Simulated plant backed by [`EnvSpec::step`].
#[derive(Clone, Debug)]
pub struct SimEnv {
    spec: EnvSpec,
    state: EnvState,
}

impl SimEnv {
    pub fn new(spec: EnvSpec) -> Self {
        let state = spec.reset();
        Self { spec, state }
    }

    pub fn with_state(spec: EnvSpec, state: EnvState) -> Self {
        Self { spec, state }
    }
}

impl EnvHandle for SimEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn observe(&self) -> &EnvState {
        &self.state
    }

    fn apply(&mut self, action: &[f64]) -> Result<()> {
        self.state = self.spec.step(&self.state, action)?;
        Ok(())
    }
}

fn chunk_of(plan: &PlanResult, start: usize, len: usize, plan_id: u64, input_index: usize) -> Vec<BufferedAction> {
    plan.actions
        .iter()
        .take(len)
        .enumerate()
        .map(|(i, a)| BufferedAction {
            step: start + i,
            action: a.clone(),
            plan_id,
            input_index,
        })
        .collect()
}

/// Actions the executor will run over `from..to`: queued ones where present,
/// otherwise a hold of the last known action.
fn pending_actions(buffer: &ActionBuffer, last: Option<&BufferedAction>, from: usize, to: usize) -> Vec<Vec<f64>> {
    let mut held = last.map(|a| a.action.clone());
    (from..to)
        .filter_map(|step| {
            if let Some(a) = buffer.get(step) {
                held = Some(a.action.clone());
            }
            held.clone()
        })
        .collect()
}

/// Start state for a plan launched at `tau` covering ticks from `chunk_start`.
fn planning_state<D: Dynamics + ?Sized>(model: &D, observed: &[f64], pending: &[Vec<f64>]) -> Vec<f64> {
    if pending.is_empty() {
        return observed.to_vec();
    }
    match predict_future_state(model, observed, pending) {
        Ok(s) if s.iter().all(|v| v.is_finite()) => s,
        // An unusable prediction falls back to the observed state.
        _ => observed.to_vec(),
    }
}

struct Episode<'a> {
    goal: &'a Goal,
    steps: Vec<StepRecord>,
    termination: Option<String>,
    last: Option<BufferedAction>,
    misses: usize,
}

impl<'a> Episode<'a> {
    fn new(goal: &'a Goal) -> Self {
        Self {
            goal,
            steps: Vec::new(),
            termination: None,
            last: None,
            misses: 0,
        }
    }

    /// Executes one tick; returns the new observation or `None` once the
    /// episode has ended.
    fn tick(&mut self, env: &mut dyn EnvHandle, t: usize, popped: Option<BufferedAction>) -> Option<Vec<f64>> {
        let (entry, held) = match popped {
            Some(a) => (a, false),
            None => {
                self.misses += 1;
                match &self.last {
                    Some(prev) => (prev.clone(), true),
                    None => {
                        self.termination = Some("no action available".into());
                        return None;
                    }
                }
            }
        };
        let state = env.observe().obs.clone();
        if let Err(e) = env.apply(&entry.action) {
            self.termination = Some(Termination::Fault(e.to_string()).reason().to_string());
            return None;
        }
        let next = env.observe();
        self.steps.push(StepRecord {
            t,
            state,
            action: entry.action.clone(),
            reward: env.spec().reward(&next.obs, self.goal),
            plan_id: entry.plan_id,
            input_index: entry.input_index,
            held,
        });
        self.last = Some(entry);
        if let Some(term) = &next.termination {
            self.termination = Some(term.reason().to_string());
            return None;
        }
        Some(next.obs.clone())
    }

    fn finish(self, env: &dyn EnvHandle, timing: TimingStats) -> EpisodeLog {
        let final_state = env.observe().obs.clone();
        let success = self.termination.is_none() && env.spec().is_success(&final_state, self.goal);
        EpisodeLog {
            goal: self.goal.clone(),
            steps: self.steps,
            final_state,
            success,
            termination: self.termination,
            timing: TimingStats {
                deadline_misses: self.misses,
                ..timing
            },
        }
    }
}

/// Runs one episode of chunked MPC against `env` under `config`.
///
/// The first chunk is planned from the initial state before the clock
/// starts. Every later plan for chunk `[c, c+x)` is started at
/// `τ = c − lead` from the observed `s_τ`, so the action executed at tick
/// `t` never depends on a state newer than `s_{t−x}` under the default lead.
pub fn run_control_loop<D, R>(
    model: &D,
    planner: &Planner,
    env: &mut dyn EnvHandle,
    goal: &Goal,
    reward: &R,
    config: &LoopConfig,
) -> Result<EpisodeLog>
where
    D: Dynamics + ?Sized,
    R: Fn(&[f64], &[f64]) -> f64 + Sync + ?Sized,
{
    config.validate()?;
    if env.observe().termination.is_some() {
        return Err(Error::Environment("episode already terminated".into()));
    }
    match &config.clock {
        Clock::Virtual(_) => run_virtual(model, planner, env, goal, reward, config),
        Clock::WallClock { system_hz } => run_wall_clock(model, planner, env, goal, reward, config, *system_hz),
    }
}

struct Job {
    plan_id: u64,
    input_index: usize,
    chunk_start: usize,
    ready_at: f64,
    result: Option<PlanResult>,
}

fn run_virtual<D, R>(
    model: &D,
    planner: &Planner,
    env: &mut dyn EnvHandle,
    goal: &Goal,
    reward: &R,
    config: &LoopConfig,
) -> Result<EpisodeLog>
where
    D: Dynamics + ?Sized,
    R: Fn(&[f64], &[f64]) -> f64 + ?Sized,
{
    let Clock::Virtual(schedule) = &config.clock else {
        unreachable!("virtual runner called with a wall clock")
    };
    let x = config.chunk;
    let lead = config.lead_ticks();
    let horizon_len = env.spec().episode_len;
    let start = env.observe().step;
    let end = horizon_len.saturating_sub(start);

    let mut states = StateBuffer::default();
    let s0 = env.observe().obs.clone();
    states.push(0, s0.clone())?;
    let mut buffer = ActionBuffer::new(x);
    let mut timing = TimingStats {
        chunk: x,
        ..TimingStats::default()
    };

    let prefill = planner.plan(model, &s0, reward, None, 0)?;
    timing.plans += 1;
    buffer.push_chunk(chunk_of(&prefill, 0, x, 0, 0))?;
    let mut last_plan = (prefill, 0usize);
    let mut next_chunk = x;
    let mut planner_free = 0.0f64;
    let mut next_id = 1u64;
    let mut job: Option<Job> = None;
    let mut ep = Episode::new(goal);

    let deliver = |job: &mut Option<Job>,
                   buffer: &mut ActionBuffer,
                   last_plan: &mut (PlanResult, usize),
                   t: usize|
     -> Result<()> {
        if job.as_ref().is_some_and(|j| j.ready_at <= t as f64) {
            let j = job.take().expect("checked above");
            if let Some(plan) = j.result {
                buffer.push_chunk(chunk_of(&plan, j.chunk_start, x, j.plan_id, j.input_index))?;
                *last_plan = (plan, j.chunk_start);
            }
        }
        Ok(())
    };

    for t in 0..end {
        deliver(&mut job, &mut buffer, &mut last_plan, t)?;
        if job.is_none() && next_chunk < end {
            let due = next_chunk.saturating_sub(lead).max(planner_free.ceil() as usize);
            if due <= t && t + lead < end {
                let chunk_start = t + lead;
                let observed = states.get(t).expect("state of the current tick is recorded").to_vec();
                let pending = pending_actions(&buffer, ep.last.as_ref(), t.max(buffer.next_exec()), chunk_start);
                let s_hat = planning_state(model, &observed, &pending);
                let warm = WarmStart {
                    actions: last_plan.0.actions.clone(),
                    shift: chunk_start - last_plan.1,
                };
                let plan_id = next_id;
                next_id += 1;
                let result = match planner.plan(model, &s_hat, reward, Some(&warm), plan_id) {
                    Ok(p) => Some(p),
                    Err(Error::Planning(_)) | Err(Error::NonFinite(_)) => {
                        timing.failed_plans += 1;
                        None
                    }
                    Err(e) => return Err(e),
                };
                timing.plans += 1;
                let latency = schedule.latency(plan_id);
                timing.latency_ticks.push(latency);
                planner_free = t as f64 + latency;
                next_chunk = chunk_start + x;
                job = Some(Job {
                    plan_id,
                    input_index: t,
                    chunk_start,
                    ready_at: t as f64 + latency,
                    result,
                });
                deliver(&mut job, &mut buffer, &mut last_plan, t)?;
            }
        }
        let popped = buffer.pop();
        match ep.tick(env, t, popped) {
            Some(obs) => states.push(t + 1, obs)?,
            None => break,
        }
    }
    Ok(ep.finish(env, timing))
}

struct Shared {
    buffer: ActionBuffer,
    states: StateBuffer,
    last: Option<BufferedAction>,
    executed: Vec<Vec<f64>>,
    done: bool,
    latencies: Vec<f64>,
    plans: u64,
    failed: u64,
    error: Option<Error>,
}

fn run_wall_clock<D, R>(
    model: &D,
    planner: &Planner,
    env: &mut dyn EnvHandle,
    goal: &Goal,
    reward: &R,
    config: &LoopConfig,
    system_hz: f64,
) -> Result<EpisodeLog>
where
    D: Dynamics + ?Sized,
    R: Fn(&[f64], &[f64]) -> f64 + Sync + ?Sized,
{
    let x = config.chunk;
    let lead = config.lead_ticks();
    let period = Duration::from_secs_f64(1.0 / system_hz);
    let end = env.spec().episode_len.saturating_sub(env.observe().step);

    let s0 = env.observe().obs.clone();
    let prefill = planner.plan(model, &s0, reward, None, 0)?;
    let mut buffer = ActionBuffer::new(x);
    buffer.push_chunk(chunk_of(&prefill, 0, x, 0, 0))?;
    let mut states = StateBuffer::default();
    states.push(0, s0)?;
    let shared = Mutex::new(Shared {
        buffer,
        states,
        last: None,
        executed: Vec::new(),
        done: false,
        latencies: Vec::new(),
        plans: 1,
        failed: 0,
        error: None,
    });
    let wake = Condvar::new();
    let mut ep = Episode::new(goal);

    std::thread::scope(|scope| {
        scope.spawn(|| {
            let mut last_plan = (prefill, 0usize);
            let mut next_chunk = x;
            let mut next_id = 1u64;
            loop {
                let (tau, observed, pending) = {
                    let mut g = shared.lock().expect("planner lock");
                    let want = next_chunk.saturating_sub(lead);
                    loop {
                        if g.done || next_chunk >= end {
                            return;
                        }
                        if g.states.latest().is_some_and(|(i, _)| i >= want) {
                            break;
                        }
                        g = wake.wait(g).expect("planner wait");
                    }
                    let (latest, _) = g.states.latest().expect("non-empty");
                    // A late wake-up skips chunks whose first tick already ran.
                    while next_chunk < latest {
                        next_chunk += x;
                    }
                    if next_chunk >= end {
                        return;
                    }
                    let tau = next_chunk.saturating_sub(lead).min(latest);
                    let s = g.states.get(tau).expect("state history").to_vec();
                    let ran = g.executed.len().min(next_chunk);
                    let mut pending = g.executed[tau.min(ran)..ran].to_vec();
                    pending.extend(pending_actions(&g.buffer, g.last.as_ref(), ran.max(tau), next_chunk));
                    (tau, s, pending)
                };
                let started = Instant::now();
                let chunk_start = next_chunk;
                let s_hat = planning_state(model, &observed, &pending);
                let warm = WarmStart {
                    actions: last_plan.0.actions.clone(),
                    shift: chunk_start - last_plan.1,
                };
                let plan_id = next_id;
                next_id += 1;
                let result = planner.plan(model, &s_hat, reward, Some(&warm), plan_id);
                let latency = started.elapsed().as_secs_f64() / period.as_secs_f64();
                let mut g = shared.lock().expect("planner lock");
                g.plans += 1;
                g.latencies.push(latency);
                match result {
                    Ok(plan) => {
                        if let Err(e) = g.buffer.push_chunk(chunk_of(&plan, chunk_start, x, plan_id, tau)) {
                            g.error = Some(e);
                            g.done = true;
                            return;
                        }
                        last_plan = (plan, chunk_start);
                    }
                    Err(Error::Planning(_)) | Err(Error::NonFinite(_)) => g.failed += 1,
                    Err(e) => {
                        g.error = Some(e);
                        g.done = true;
                        return;
                    }
                }
                next_chunk = chunk_start + x;
            }
        });

        let clock_start = Instant::now();
        for t in 0..end {
            let due = clock_start + period * t as u32;
            if let Some(wait) = due.checked_duration_since(Instant::now()) {
                std::thread::sleep(wait);
            }
            let popped = {
                let mut g = shared.lock().expect("executor lock");
                if g.done {
                    break;
                }
                g.buffer.pop()
            };
            let next = ep.tick(env, t, popped);
            let mut g = shared.lock().expect("executor lock");
            g.last = ep.last.clone();
            if let Some(a) = &ep.last {
                g.executed.push(a.action.clone());
            }
            match next {
                Some(obs) => {
                    if let Err(e) = g.states.push(t + 1, obs) {
                        g.error = Some(e);
                        g.done = true;
                    }
                    wake.notify_all();
                }
                None => break,
            }
        }
        shared.lock().expect("executor lock").done = true;
        wake.notify_all();
    });

    let shared = shared.into_inner().expect("threads joined");
    if let Some(e) = shared.error {
        return Err(e);
    }
    let timing = TimingStats {
        chunk: x,
        plans: shared.plans,
        failed_plans: shared.failed,
        deadline_misses: 0,
        latency_ticks: shared.latencies,
    };
    Ok(ep.finish(env, timing))
}

/// Runs an episode under a direct state-feedback law `policy(t, s_t)`.
/// Used for random warm-up, scripted and oracle controllers.
pub fn run_feedback<P>(env: &mut dyn EnvHandle, goal: &Goal, mut policy: P) -> Result<EpisodeLog>
where
    P: FnMut(usize, &[f64]) -> Vec<f64>,
{
    if env.observe().termination.is_some() {
        return Err(Error::Environment("episode already terminated".into()));
    }
    let end = env.spec().episode_len.saturating_sub(env.observe().step);
    let mut ep = Episode::new(goal);
    for t in 0..end {
        let action = policy(t, &env.observe().obs);
        let entry = BufferedAction {
            step: t,
            action,
            plan_id: 0,
            input_index: t,
        };
        if ep.tick(env, t, Some(entry)).is_none() {
            break;
        }
    }
    Ok(ep.finish(env, TimingStats::default()))
}

/// Reference synchronous MPC: plan from the observed state every `chunk`
/// ticks and execute the first `chunk` actions open-loop.
pub fn run_synchronous_mpc<D, R>(
    model: &D,
    planner: &Planner,
    env: &mut dyn EnvHandle,
    goal: &Goal,
    reward: &R,
    chunk: usize,
) -> Result<EpisodeLog>
where
    D: Dynamics + ?Sized,
    R: Fn(&[f64], &[f64]) -> f64 + ?Sized,
{
    if chunk == 0 {
        return Err(Error::config("chunk size must be at least 1"));
    }
    let end = env.spec().episode_len.saturating_sub(env.observe().step);
    let mut ep = Episode::new(goal);
    let mut timing = TimingStats {
        chunk,
        ..TimingStats::default()
    };
    let mut prev: Option<PlanResult> = None;
    let mut t = 0;
    let mut plan_id = 0u64;
    'outer: while t < end {
        let s = env.observe().obs.clone();
        let warm = prev.as_ref().map(|p| WarmStart {
            actions: p.actions.clone(),
            shift: chunk,
        });
        let plan = planner.plan(model, &s, reward, warm.as_ref(), plan_id)?;
        timing.plans += 1;
        for entry in chunk_of(&plan, t, chunk.min(end - t), plan_id, t) {
            if ep.tick(env, entry.step, Some(entry)).is_none() {
                break 'outer;
            }
        }
        t += chunk;
        plan_id += 1;
        prev = Some(plan);
    }
    Ok(ep.finish(env, timing))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::tests::Linear;
    use crate::planner::PlannerConfig;
    use crate::policy::{LatencySchedule, PlanningLead};

    /// `s' = 0.5 s + a` on a one-dimensional state, matching `Linear`.
    struct LinearPlant {
        spec: EnvSpec,
        state: EnvState,
    }

    impl LinearPlant {
        fn new() -> Self {
            let spec = EnvSpec::identity(1, 1);
            let mut state = spec.reset();
            state.obs = vec![3.0];
            Self { spec, state }
        }
    }

    impl EnvHandle for LinearPlant {
        fn spec(&self) -> &EnvSpec {
            &self.spec
        }
        fn observe(&self) -> &EnvState {
            &self.state
        }
        fn apply(&mut self, action: &[f64]) -> Result<()> {
            self.state.obs[0] = 0.5 * self.state.obs[0] + action[0];
            self.state.step += 1;
            Ok(())
        }
    }

    fn model() -> Linear {
        Linear {
            dim: 1,
            scale: 0.5,
            gain: 1.0,
        }
    }

    fn planner() -> Planner {
        Planner::new(PlannerConfig {
            horizon: 6,
            population: 40,
            elites: 5,
            iterations: 3,
            action_low: vec![-1.0],
            action_high: vec![1.0],
            smoothing: 0.01,
            seed: 11,
            ..PlannerConfig::default()
        })
        .unwrap()
    }

    fn reward(s: &[f64], _: &[f64]) -> f64 {
        -(s[0] - 1.0).abs()
    }

    fn goal() -> Goal {
        Goal {
            id: 0,
            position: None,
            orientation: None,
            thresholds: Default::default(),
        }
    }

    fn run(config: LoopConfig) -> EpisodeLog {
        let mut env = LinearPlant::new();
        run_control_loop(&model(), &planner(), &mut env, &goal(), &reward, &config).unwrap()
    }

    fn assert_gapless(log: &EpisodeLog, len: usize) {
        assert_eq!(log.steps.len(), len);
        for (i, s) in log.steps.iter().enumerate() {
            assert_eq!(s.t, i);
            assert!(s.action.iter().all(|a| a.is_finite()));
        }
    }

    fn assert_causal(log: &EpisodeLog, x: usize) {
        for s in &log.steps {
            if s.plan_id > 0 {
                assert!(s.input_index + x <= s.t, "step {} used state {}", s.t, s.input_index);
            }
        }
    }

    #[test]
    fn immediate_lead_matches_synchronous_mpc() {
        for x in [1, 2, 3] {
            let asynchronous = run(LoopConfig::synchronous(x));
            let mut env = LinearPlant::new();
            let sync = run_synchronous_mpc(&model(), &planner(), &mut env, &goal(), &reward, x).unwrap();
            assert_eq!(asynchronous.steps, sync.steps, "chunk {x}");
            assert_eq!(asynchronous.final_state, sync.final_state);
            assert_eq!(asynchronous.timing.deadline_misses, 0);
        }
    }

    #[test]
    fn latency_within_budget_never_misses() {
        for latency in [0.0, 0.4, 1.5, 2.0] {
            let log = run(LoopConfig::virtual_clock(2, latency));
            assert_eq!(log.timing.deadline_misses, 0, "latency {latency}");
            assert!(log.steps.iter().all(|s| !s.held));
            assert_gapless(&log, 50);
            assert_causal(&log, 2);
            assert!(log.timing.plans >= 25);
        }
    }

    #[test]
    fn overrun_holds_and_recovers() {
        let config = LoopConfig {
            chunk: 2,
            lead: PlanningLead::Chunk,
            clock: Clock::Virtual(LatencySchedule::Sequence(vec![0.5, 0.5, 5.0, 0.5])),
        };
        let log = run(config);
        assert_gapless(&log, 50);
        assert_causal(&log, 2);
        assert!(log.timing.deadline_misses > 0);
        let held = log.steps.iter().filter(|s| s.held).count();
        assert_eq!(held, log.timing.deadline_misses);
        for w in log.steps.windows(2) {
            if w[1].held {
                assert_eq!(w[1].action, w[0].action);
            }
        }
        // Planning resumes after the overrun.
        assert!(!log.steps.last().unwrap().held);
        assert!(log.termination.is_none());
    }

    #[test]
    fn virtual_runs_are_deterministic() {
        let a = run(LoopConfig::virtual_clock(3, 2.5));
        let b = run(LoopConfig::virtual_clock(3, 2.5));
        assert_eq!(a, b);
        assert_causal(&a, 3);
    }

    #[test]
    fn planning_regulates_the_plant() {
        let log = run(LoopConfig::virtual_clock(2, 1.0));
        assert!((log.final_state[0] - 1.0).abs() < 0.1, "{:?}", log.final_state);
    }

    #[test]
    fn wall_clock_run_is_causal_and_complete() {
        let config = LoopConfig {
            chunk: 2,
            lead: PlanningLead::Chunk,
            clock: Clock::WallClock { system_hz: 200.0 },
        };
        let log = run(config);
        assert_gapless(&log, 50);
        assert_causal(&log, 2);
        assert_eq!(log.steps.iter().filter(|s| s.held).count(), log.timing.deadline_misses);
    }
}
