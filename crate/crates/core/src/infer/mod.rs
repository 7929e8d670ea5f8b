//! Sampling schedule, guidance, ODE integration, condition assembly and the
//! end-to-end enhancement pipeline.

mod assemble;
mod pipeline;
mod solver;
mod sweep;

pub use assemble::{assemble_inference, InferenceLayout, MAX_PROMPT_S};
pub use pipeline::{
    acoustic_mel, cfg_velocity, enhance, generate_mel, infill, EnhanceOutput, EnhanceRequest, FlowSettings, Models,
};
pub use solver::{cfg_combine, ode_solve, sway_times, OdeMethod};
pub use sweep::{run_sweep, write_sweep_csv, SweepGrid, SweepItem, SweepRow};
