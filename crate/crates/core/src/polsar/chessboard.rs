//! Chessboard-like spatial partition into two disjoint halves.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One colour of the board. Tile `(r, c)` is black when `r + c` is even.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Black,
    White,
}

impl Part {
    pub fn other(self) -> Part {
        match self {
            Part::Black => Part::White,
            Part::White => Part::Black,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Part::Black => 0,
            Part::White => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Part> {
        match i {
            0 => Some(Part::Black),
            1 => Some(Part::White),
            _ => None,
        }
    }
}

impl fmt::Display for Part {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Part::Black => "black",
            Part::White => "white",
        })
    }
}

impl FromStr for Part {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "black" => Ok(Part::Black),
            "white" => Ok(Part::White),
            other => Err(Error::InvalidValue(format!("unknown part '{}'", other))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChessboardSplit {
    pub height: usize,
    pub width: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    black: Vec<usize>,
    white: Vec<usize>,
}

impl ChessboardSplit {
    /// Tiles are `H / grid_rows` by `W / grid_cols` pixels; leftover rows and
    /// columns join the last tile row / column.
    pub fn new(height: usize, width: usize, grid_rows: usize, grid_cols: usize) -> Result<Self> {
        if grid_rows == 0 || grid_cols == 0 {
            return Err(Error::InvalidValue("grid must have at least one tile".into()));
        }
        if grid_rows > height || grid_cols > width {
            return Err(Error::InvalidValue(format!(
                "{}x{} grid does not fit a {}x{} image",
                grid_rows, grid_cols, height, width
            )));
        }
        let mut split = Self {
            height,
            width,
            grid_rows,
            grid_cols,
            black: Vec::new(),
            white: Vec::new(),
        };
        for row in 0..height {
            for col in 0..width {
                let i = row * width + col;
                match split.part_of(row, col) {
                    Part::Black => split.black.push(i),
                    Part::White => split.white.push(i),
                }
            }
        }
        Ok(split)
    }

    pub fn tile_of(&self, row: usize, col: usize) -> (usize, usize) {
        let th = self.height / self.grid_rows;
        let tw = self.width / self.grid_cols;
        ((row / th).min(self.grid_rows - 1), (col / tw).min(self.grid_cols - 1))
    }

    pub fn tile_part(tile_row: usize, tile_col: usize) -> Part {
        if (tile_row + tile_col).is_multiple_of(2) {
            Part::Black
        } else {
            Part::White
        }
    }

    pub fn part_of(&self, row: usize, col: usize) -> Part {
        let (tr, tc) = self.tile_of(row, col);
        Self::tile_part(tr, tc)
    }

    /// Flat pixel indices (`row * W + col`) of a part, ascending.
    pub fn pixels(&self, part: Part) -> &[usize] {
        match part {
            Part::Black => &self.black,
            Part::White => &self.white,
        }
    }

    pub fn tiles(&self, part: Part) -> Vec<(usize, usize)> {
        (0..self.grid_rows)
            .flat_map(|r| (0..self.grid_cols).map(move |c| (r, c)))
            .filter(|&(r, c)| Self::tile_part(r, c) == part)
            .collect()
    }
}

/// Splits an `height x width` raster with a `grid_rows x grid_cols` board.
pub fn chessboard_partition(
    height: usize,
    width: usize,
    grid_rows: usize,
    grid_cols: usize,
) -> Result<ChessboardSplit> {
    ChessboardSplit::new(height, width, grid_rows, grid_cols)
}
