//! Plain-text maze layouts.
//!
//! One character per cell: `#` wall, `.` free, `S` start, `G` goal. Lines
//! starting with `@` set a parameter (`@action_max 0.15`); lines starting
//! with `;` are comments. Row 0 is the first grid line.

use std::fs;
use std::path::Path;

use super::{Aabb, MazeSpec};
use crate::error::{config_err, Error, Result};

pub const BUILTIN_LAYOUTS: &[(&str, &str)] = &[
    (
        "open",
        "; open arena for the guidance-length comparison
#######
#S....#
#.....#
#.....#
#.....#
#....G#
#######
",
    ),
    (
        "umaze",
        "#####
#S..#
###.#
#G..#
#####
",
    ),
    (
        "medium",
        "@max_episode_steps 500
########
#S.#...#
#..#.#G#
##...#.#
#..#...#
#.##.#.#
#G...#G#
########
",
    ),
];

pub fn builtin_layout(name: &str) -> Result<MazeSpec> {
    BUILTIN_LAYOUTS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(n, text)| parse_layout(n, text))
        .unwrap_or_else(|| config_err(format!("unknown layout {name:?}")))
}

/// A built-in layout name, or a path to a layout file.
pub fn load_layout(name_or_path: &str) -> Result<MazeSpec> {
    if BUILTIN_LAYOUTS.iter().any(|(n, _)| *n == name_or_path) {
        return builtin_layout(name_or_path);
    }
    let path = Path::new(name_or_path);
    let text = fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| name_or_path.to_string());
    parse_layout(&name, &text)
}

pub fn parse_layout(name: &str, text: &str) -> Result<MazeSpec> {
    let mut cell_size = 1.0;
    let mut success_radius = 0.3;
    let mut action_max = 0.15;
    let mut max_episode_steps = 300usize;
    let mut action_repeat = 1usize;
    let mut start_jitter = 0.25;

    let mut grid: Vec<&str> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        if line.is_empty() || line.starts_with(';') {
            continue;
        }
        if let Some(rest) = line.strip_prefix('@') {
            let mut parts = rest.split_whitespace();
            let (Some(key), Some(value), None) = (parts.next(), parts.next(), parts.next()) else {
                return config_err(format!("line {}: expected `@key value`", lineno + 1));
            };
            let num = |v: &str| -> Result<f64> {
                v.parse::<f64>()
                    .map_err(|_| Error::Config(format!("line {}: bad number {v:?}", lineno + 1)))
            };
            match key {
                "cell_size" => cell_size = num(value)?,
                "success_radius" => success_radius = num(value)?,
                "action_max" => action_max = num(value)?,
                "start_jitter" => start_jitter = num(value)?,
                "max_episode_steps" => max_episode_steps = num(value)? as usize,
                "action_repeat" => action_repeat = num(value)? as usize,
                _ => return config_err(format!("line {}: unknown key {key:?}", lineno + 1)),
            }
            continue;
        }
        grid.push(line);
    }

    let rows = grid.len();
    if rows == 0 {
        return config_err("layout has no grid rows");
    }
    let cols = grid[0].chars().count();
    let mut walls = Vec::with_capacity(rows * cols);
    let mut starts = Vec::new();
    let mut goals = Vec::new();
    for (r, line) in grid.iter().enumerate() {
        if line.chars().count() != cols {
            return config_err(format!("grid row {r} has a different width"));
        }
        for (c, ch) in line.chars().enumerate() {
            match ch {
                '#' => walls.push(true),
                '.' => walls.push(false),
                'S' => {
                    walls.push(false);
                    starts.push((r, c));
                }
                'G' => {
                    walls.push(false);
                    goals.push((r, c));
                }
                other => return config_err(format!("unexpected layout character {other:?}")),
            }
        }
    }
    if starts.is_empty() {
        return config_err("layout has no start cell");
    }

    let center = |(r, c): (usize, usize)| [(c as f64 + 0.5) * cell_size, (r as f64 + 0.5) * cell_size];
    let j = start_jitter * cell_size;
    let mut region = Aabb {
        min: [f64::INFINITY; 2],
        max: [f64::NEG_INFINITY; 2],
    };
    for &s in &starts {
        let p = center(s);
        for i in 0..2 {
            region.min[i] = region.min[i].min(p[i] - j);
            region.max[i] = region.max[i].max(p[i] + j);
        }
    }

    let spec = MazeSpec {
        name: name.to_string(),
        rows,
        cols,
        walls,
        cell_size,
        start_region: region,
        goal_positions: goals.into_iter().map(center).collect(),
        success_radius,
        action_max,
        max_episode_steps,
        action_repeat,
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse() {
        for (name, _) in BUILTIN_LAYOUTS {
            let spec = builtin_layout(name).unwrap();
            assert!(!spec.goal_positions.is_empty(), "{name}");
        }
        assert_eq!(builtin_layout("medium").unwrap().goal_positions.len(), 3);
        assert_eq!(builtin_layout("umaze").unwrap().goal_positions, vec![[1.5, 3.5]]);
    }

    #[test]
    fn header_and_errors() {
        let spec = parse_layout("t", "@action_max 0.2\n@action_repeat 3\n###\n#S#\n###\n").unwrap();
        assert_eq!(spec.action_max, 0.2);
        assert_eq!(spec.action_repeat, 3);
        assert!(parse_layout("t", "@bogus 1\n#S#\n").is_err());
        assert!(parse_layout("t", "#S#\n##\n").is_err());
        assert!(parse_layout("t", "#.#\n").is_err());
        assert!(parse_layout("t", "#Sx\n").is_err());
        // jitter large enough to touch a wall
        assert!(parse_layout("t", "@start_jitter 0.6\n###\n#S#\n###\n").is_err());
    }
}
