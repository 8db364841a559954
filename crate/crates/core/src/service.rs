//! Live simulation service speaking newline-delimited JSON over TCP.
//!
//! Client messages:
//! `{"type":"control","a":..,"delta":..}`,
//! `{"type":"set_obstacles","obstacles":[{"x":..,"y":..,"r":..}]}`,
//! `{"type":"reset","state":{"x":..,"y":..,"v":..,"theta":..}}`,
//! `{"type":"get_brt_slice"}` with optional `v_index` / `theta_index`
//! (defaulting to the car's nearest cell).
//!
//! The server pushes a `state` message every tick (50 Hz) and answers
//! `get_brt_slice` with a `brt_slice` message whose `values` hold
//! `V(x_i, y_j)` at index `j * width + i`. Malformed input gets an `error`
//! reply; the connection stays open.
//!
//! Threads: one simulation loop owning the car, one solver that always works
//! on the newest obstacle set, and a reader and a writer per connection.
//! Connections talk to the loop only through a channel.

use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::config::{Datapath, RunConfig};
use crate::dynamics::{CarControl, CarState, DubinsCar};
use crate::error::{Error, Result};
use crate::fixedpoint::solve_fixed;
use crate::grid::ValueField;
use crate::safety::{build_initial_values, BrtSlot, Environment, Obstacle, Simulation, PLANT_DT};
use crate::solver::solve;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Control {
        a: f64,
        delta: f64,
    },
    SetObstacles {
        obstacles: Vec<Obstacle>,
    },
    Reset {
        state: CarState,
    },
    GetBrtSlice {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        v_index: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        theta_index: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    State {
        t: f64,
        x: f64,
        y: f64,
        v: f64,
        theta: f64,
        user_control: CarControl,
        applied_control: CarControl,
        intervening: bool,
        brt_value: f64,
        brt_stale: bool,
    },
    BrtSlice {
        v_index: usize,
        theta_index: usize,
        width: usize,
        height: usize,
        x_min: f64,
        y_min: f64,
        dx: f64,
        dy: f64,
        values: Vec<f64>,
    },
    Error {
        message: String,
    },
}

impl ServerMessage {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("server messages serialize");
        s.push('\n');
        s
    }
}

/// The x-y slice of `field` at fixed speed and heading indices.
pub fn brt_slice(field: &ValueField<f64>, v_index: usize, theta_index: usize) -> Result<ServerMessage> {
    let g = field.grid();
    let [nx, ny, nv, nt] = g.dims();
    if v_index >= nv || theta_index >= nt {
        return Err(Error::IndexOutOfRange {
            index: [0, 0, v_index, theta_index],
            dims: g.dims(),
        });
    }
    let mut values = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            values.push(field.get([i, j, v_index, theta_index])?);
        }
    }
    Ok(ServerMessage::BrtSlice {
        v_index,
        theta_index,
        width: nx,
        height: ny,
        x_min: g.mins()[0],
        y_min: g.mins()[1],
        dx: g.spacings()[0],
        dy: g.spacings()[1],
        values,
    })
}

/// Nearest speed and heading node indices for a state.
pub fn nearest_cell(field: &ValueField<f64>, s: &CarState) -> (usize, usize) {
    let g = field.grid();
    let [_, _, nv, nt] = g.dims();
    let v = ((s.v - g.mins()[2]) / g.spacings()[2]).round().clamp(0.0, (nv - 1) as f64) as usize;
    let t = ((s.theta - g.mins()[3]) / g.spacings()[3]).round().rem_euclid(nt as f64) as usize % nt;
    (v, t)
}

fn solve_environment(cfg: &RunConfig, car: &DubinsCar, env: &Environment) -> Result<ValueField<f64>> {
    let v0 = build_initial_values(env, &cfg.grid)?;
    Ok(match cfg.datapath {
        Datapath::Float => solve(&v0, car, &cfg.solver)?.0,
        Datapath::Fixed => solve_fixed(&v0, car, &cfg.solver)?.0.map(|q| q.to_f64()),
    })
}

enum Command {
    Subscribe(Sender<String>),
    Control(CarControl),
    Reset(CarState),
    Obstacles(Environment),
    Slice {
        v_index: Option<usize>,
        theta_index: Option<usize>,
        reply: Sender<String>,
    },
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub tick: Duration,
    pub initial_state: CarState,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            tick: Duration::from_secs_f64(PLANT_DT),
            initial_state: CarState::new(0.5, 0.5, 0.0, 0.0),
        }
    }
}

/// Run the service until `shutdown` is set.
pub fn serve(listener: TcpListener, cfg: &RunConfig, shutdown: Arc<AtomicBool>) -> Result<()> {
    serve_with(listener, cfg, ServeOptions::default(), shutdown)
}

pub fn serve_with(
    listener: TcpListener,
    cfg: &RunConfig,
    opts: ServeOptions,
    shutdown: Arc<AtomicBool>,
) -> Result<()> {
    let car = DubinsCar::new(cfg.dynamics)?;
    let v0 = build_initial_values(&cfg.environment, &cfg.grid)?;
    let slot = Arc::new(BrtSlot::new(v0));
    let (solve_tx, solve_rx) = mpsc::channel::<(u64, Environment)>();
    let (cmd_tx, cmd_rx) = mpsc::channel::<Command>();

    let solver = {
        let cfg = cfg.clone();
        let slot = Arc::clone(&slot);
        let shutdown = Arc::clone(&shutdown);
        thread::Builder::new()
            .name("hjreach-solver".into())
            .spawn(move || solver_thread(&cfg, &car, &slot, solve_rx, &shutdown))?
    };
    solve_tx
        .send((slot.request(), cfg.environment.clone()))
        .expect("solver thread is running");

    let sim_loop = {
        let cfg = cfg.clone();
        let slot = Arc::clone(&slot);
        let shutdown = Arc::clone(&shutdown);
        thread::Builder::new().name("hjreach-loop".into()).spawn(move || {
            let sim = Simulation::new(car, &cfg.grid, opts.initial_state);
            sim_thread(sim, opts.tick, &slot, cmd_rx, solve_tx, &shutdown)
        })?
    };

    listener.set_nonblocking(true)?;
    log::info!("listening on {}", listener.local_addr()?);
    while !shutdown.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::info!("client connected from {peer}");
                if let Err(e) = start_connection(stream, cmd_tx.clone(), &cfg.environment, Arc::clone(&shutdown)) {
                    log::warn!("could not start connection: {e}");
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
            Err(e) => return Err(e.into()),
        }
    }
    drop(cmd_tx);
    let _ = sim_loop.join();
    let _ = solver.join();
    Ok(())
}

fn solver_thread(
    cfg: &RunConfig,
    car: &DubinsCar,
    slot: &BrtSlot,
    rx: Receiver<(u64, Environment)>,
    shutdown: &AtomicBool,
) {
    while !shutdown.load(Ordering::Relaxed) {
        let mut job = match rx.recv_timeout(Duration::from_millis(50)) {
            Ok(job) => job,
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => return,
        };
        // Only the newest pending request matters.
        while let Ok(newer) = rx.try_recv() {
            job = newer;
        }
        let (generation, env) = job;
        let start = Instant::now();
        match solve_environment(cfg, car, &env) {
            Ok(field) => {
                let installed = slot.install(generation, field);
                log::info!(
                    "re-solve {generation} finished in {:.2}s{}",
                    start.elapsed().as_secs_f64(),
                    if installed { "" } else { ", superseded" }
                );
            }
            Err(e) => log::error!("re-solve {generation} failed: {e}"),
        }
    }
}

fn sim_thread(
    mut sim: Simulation,
    tick: Duration,
    slot: &BrtSlot,
    rx: Receiver<Command>,
    solve_tx: Sender<(u64, Environment)>,
    shutdown: &AtomicBool,
) {
    let mut subscribers: Vec<Sender<String>> = Vec::new();
    let mut user = CarControl::default();
    let mut t = 0.0;
    let mut next = Instant::now();
    let slice_for = |field: &ValueField<f64>, s: &CarState, v: Option<usize>, th: Option<usize>| {
        let (nv, nt) = nearest_cell(field, s);
        brt_slice(field, v.unwrap_or(nv), th.unwrap_or(nt))
            .unwrap_or_else(|e| ServerMessage::Error { message: e.to_string() })
            .to_line()
    };
    while !shutdown.load(Ordering::Relaxed) {
        loop {
            match rx.try_recv() {
                Ok(Command::Subscribe(tx)) => subscribers.push(tx),
                Ok(Command::Control(u)) => user = u,
                Ok(Command::Reset(s)) => {
                    sim.reset(s);
                    t = 0.0;
                }
                Ok(Command::Obstacles(env)) => {
                    let generation = slot.request();
                    if solve_tx.send((generation, env)).is_err() {
                        log::error!("solver thread is gone");
                    }
                }
                Ok(Command::Slice {
                    v_index,
                    theta_index,
                    reply,
                }) => {
                    let (field, _) = slot.current();
                    let _ = reply.send(slice_for(&field, &sim.state, v_index, theta_index));
                }
                Err(mpsc::TryRecvError::Empty) => break,
                Err(mpsc::TryRecvError::Disconnected) => return,
            }
        }
        let (field, stale) = slot.current();
        match sim.step(&field, user) {
            Ok(rec) => {
                t += sim.dt;
                let line = ServerMessage::State {
                    t,
                    x: sim.state.x,
                    y: sim.state.y,
                    v: sim.state.v,
                    theta: sim.state.theta,
                    user_control: rec.user_control,
                    applied_control: rec.applied_control,
                    intervening: rec.intervening,
                    brt_value: rec.value,
                    brt_stale: stale,
                }
                .to_line();
                subscribers.retain(|tx| tx.send(line.clone()).is_ok());
            }
            Err(e) => log::error!("simulation step failed: {e}"),
        }
        next += tick;
        let now = Instant::now();
        if next > now {
            thread::sleep(next - now);
        } else {
            // fell behind; do not try to catch up
            next = now;
        }
    }
}

fn start_connection(
    stream: TcpStream,
    cmd_tx: Sender<Command>,
    room: &Environment,
    shutdown: Arc<AtomicBool>,
) -> Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_millis(100)))?;
    let (out_tx, out_rx) = mpsc::channel::<String>();
    let mut writer = stream.try_clone()?;
    thread::Builder::new().name("hjreach-writer".into()).spawn(move || {
        for line in out_rx {
            if writer.write_all(line.as_bytes()).and_then(|_| writer.flush()).is_err() {
                break;
            }
        }
    })?;
    cmd_tx
        .send(Command::Subscribe(out_tx.clone()))
        .map_err(|_| Error::Stream("simulation loop is not running".into()))?;
    let (width, height) = (room.width, room.height);
    thread::Builder::new().name("hjreach-reader".into()).spawn(move || {
        let mut reader = BufReader::new(stream);
        let mut line = String::new();
        while !shutdown.load(Ordering::Relaxed) {
            match reader.read_line(&mut line) {
                Ok(0) => break,
                Ok(_) => {
                    let text = line.trim();
                    if !text.is_empty() {
                        if let Some(reply) = handle_line(text, &cmd_tx, &out_tx, width, height) {
                            if out_tx.send(reply.to_line()).is_err() {
                                break;
                            }
                        }
                    }
                    line.clear();
                }
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
                Err(_) => break,
            }
        }
    })?;
    Ok(())
}

/// Dispatch one client line; returns an immediate reply for errors.
fn handle_line(
    text: &str,
    cmd_tx: &Sender<Command>,
    out_tx: &Sender<String>,
    width: f64,
    height: f64,
) -> Option<ServerMessage> {
    let err = |message: String| Some(ServerMessage::Error { message });
    let msg: ClientMessage = match serde_json::from_str(text) {
        Ok(m) => m,
        Err(e) => return err(format!("malformed message: {e}")),
    };
    let cmd = match msg {
        ClientMessage::Control { a, delta } => {
            if !(a.is_finite() && delta.is_finite()) {
                return err("control values must be finite".into());
            }
            Command::Control(CarControl::new(a, delta))
        }
        ClientMessage::Reset { state } => {
            if !state.to_array().iter().all(|x| x.is_finite()) {
                return err("reset state must be finite".into());
            }
            Command::Reset(state)
        }
        ClientMessage::SetObstacles { obstacles } => {
            match Environment::new(width, height, obstacles) {
                Ok(env) if !env.obstacles.is_empty() => Command::Obstacles(env),
                Ok(_) => return err("at least one obstacle is required".into()),
                Err(e) => return err(e.to_string()),
            }
        }
        ClientMessage::GetBrtSlice { v_index, theta_index } => Command::Slice {
            v_index,
            theta_index,
            reply: out_tx.clone(),
        },
    };
    if cmd_tx.send(cmd).is_err() {
        return err("simulation loop is not running".into());
    }
    None
}
