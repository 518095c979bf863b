//! Library side of the `ballworld` command: scenario files, CSV and SVG
//! writers. The binary only wires these to the command line.

pub mod output;
pub mod scenario_file;
pub mod svg;

/// Process exit codes; nothing else is ever returned.
pub mod exit {
    pub const SUCCESS: u8 = 0;
    /// Runtime error in a trajectory or a failed property.
    pub const FAILURE: u8 = 1;
    /// Unreadable or invalid input.
    pub const INVALID_INPUT: u8 = 2;
}
