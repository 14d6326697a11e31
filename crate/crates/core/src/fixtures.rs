//! Small hand-built networks shared by the test suites, docs, and quick CLI
//! experiments. Kept in the library (not test-only) so the acceptance suite
//! and the CLI smoke paths use the exact same data.

use crate::netmodel::{Branch, Bus, Demand, Generator, GridCase, Storage};

/// Three buses in a triangle, all reactances 1 p.u., generator at the slack
/// bus 1 and a cheaper one at bus 2, a single demand at bus 3. No storage.
pub fn three_bus_triangle() -> GridCase {
    GridCase {
        buses: vec![
            Bus { id: 1, demand_mw: 0.0 },
            Bus { id: 2, demand_mw: 0.0 },
            Bus { id: 3, demand_mw: 50.0 },
        ],
        branches: vec![
            branch(1, 2, 1.0, 100.0),
            branch(2, 3, 1.0, 100.0),
            branch(1, 3, 1.0, 100.0),
        ],
        generators: vec![
            Generator { bus: 1, p_min: 0.0, p_max: 100.0, cost_quad: 0.02, cost_lin: 30.0 },
            Generator { bus: 2, p_min: 0.0, p_max: 80.0, cost_quad: 0.01, cost_lin: 20.0 },
        ],
        storages: vec![],
        demands: vec![Demand { bus: 3, column: 0 }],
        slack_bus: 1,
        delta_hours: 0.25,
    }
}

/// Triangle variant with a tight limit on the line feeding the load from the
/// cheap remote generator, so optimal plans saturate exactly one line.
pub fn three_bus_line_limited() -> GridCase {
    let mut case = three_bus_triangle();
    for br in &mut case.branches {
        br.flow_limit_mw = 25.0;
    }
    case
}

/// Six buses on a ring 1-2-3-4-5-6-1 with a 2-5 chord, two storages, three
/// demands. Every non-slack bus carries a device or a demand, so the nodal
/// injections are identifiable (full-rank PTDF regression).
pub fn six_bus_two_storage() -> GridCase {
    GridCase {
        buses: vec![
            Bus { id: 1, demand_mw: 0.0 },
            Bus { id: 2, demand_mw: 40.0 },
            Bus { id: 3, demand_mw: 0.0 },
            Bus { id: 4, demand_mw: 30.0 },
            Bus { id: 5, demand_mw: 0.0 },
            Bus { id: 6, demand_mw: 50.0 },
        ],
        branches: vec![
            branch(1, 2, 0.10, 80.0),
            branch(2, 3, 0.08, 80.0),
            branch(3, 4, 0.12, 80.0),
            branch(4, 5, 0.09, 80.0),
            branch(5, 6, 0.11, 80.0),
            branch(6, 1, 0.10, 80.0),
            branch(2, 5, 0.15, 60.0),
        ],
        generators: vec![
            Generator { bus: 1, p_min: 0.0, p_max: 200.0, cost_quad: 0.020, cost_lin: 25.0 },
            Generator { bus: 2, p_min: 0.0, p_max: 120.0, cost_quad: 0.015, cost_lin: 18.0 },
            Generator { bus: 3, p_min: 0.0, p_max: 80.0, cost_quad: 0.040, cost_lin: 35.0 },
        ],
        storages: vec![
            Storage {
                bus: 4,
                e_min: 0.0,
                e_max: 40.0,
                s_min: -15.0,
                s_max: 15.0,
                e0: 20.0,
                cost_quad_power: 0.01,
                cost_quad_energy: 1e-5,
            },
            Storage {
                bus: 5,
                e_min: 0.0,
                e_max: 60.0,
                s_min: -20.0,
                s_max: 20.0,
                e0: 30.0,
                cost_quad_power: 0.01,
                cost_quad_energy: 1e-5,
            },
        ],
        demands: vec![
            Demand { bus: 2, column: 0 },
            Demand { bus: 4, column: 1 },
            Demand { bus: 6, column: 2 },
        ],
        slack_bus: 1,
        delta_hours: 0.25,
    }
}

/// A 14-bus meshed network patterned on the classic 14-bus test system
/// (standard topology, reactances, taps, and demand pattern), with one
/// storage added at bus 10.
pub fn fourteen_bus_one_storage() -> GridCase {
    let lines: &[(usize, usize, f64, f64)] = &[
        (1, 2, 0.05917, 1.0),
        (1, 5, 0.22304, 1.0),
        (2, 3, 0.19797, 1.0),
        (2, 4, 0.17632, 1.0),
        (2, 5, 0.17388, 1.0),
        (3, 4, 0.17103, 1.0),
        (4, 5, 0.04211, 1.0),
        (4, 7, 0.20912, 0.978),
        (4, 9, 0.55618, 0.969),
        (5, 6, 0.25202, 0.932),
        (6, 11, 0.19890, 1.0),
        (6, 12, 0.25581, 1.0),
        (6, 13, 0.13027, 1.0),
        (7, 8, 0.17615, 1.0),
        (7, 9, 0.11001, 1.0),
        (9, 10, 0.08450, 1.0),
        (9, 14, 0.27038, 1.0),
        (10, 11, 0.19207, 1.0),
        (12, 13, 0.19988, 1.0),
        (13, 14, 0.34802, 1.0),
    ];
    let loads: &[(usize, f64)] = &[
        (2, 21.7),
        (3, 94.2),
        (4, 47.8),
        (5, 7.6),
        (6, 11.2),
        (9, 29.5),
        (10, 9.0),
        (11, 3.5),
        (12, 6.1),
        (13, 13.5),
        (14, 14.9),
    ];
    let load_of = |id: usize| loads.iter().find(|(b, _)| *b == id).map_or(0.0, |(_, p)| *p);

    GridCase {
        buses: (1..=14)
            .map(|id| Bus { id, demand_mw: load_of(id) })
            .collect(),
        branches: lines
            .iter()
            .map(|&(f, t, x, tap)| Branch {
                from: f,
                to: t,
                reactance: x,
                tap,
                flow_limit_mw: 160.0,
            })
            .collect(),
        generators: vec![
            Generator { bus: 1, p_min: 0.0, p_max: 332.4, cost_quad: 0.0430293, cost_lin: 20.0 },
            Generator { bus: 2, p_min: 0.0, p_max: 140.0, cost_quad: 0.25, cost_lin: 20.0 },
            Generator { bus: 3, p_min: 0.0, p_max: 100.0, cost_quad: 0.01, cost_lin: 40.0 },
            Generator { bus: 6, p_min: 0.0, p_max: 100.0, cost_quad: 0.01, cost_lin: 40.0 },
            Generator { bus: 8, p_min: 0.0, p_max: 100.0, cost_quad: 0.01, cost_lin: 40.0 },
        ],
        storages: vec![Storage {
            bus: 10,
            e_min: 0.0,
            e_max: 30.0,
            s_min: -10.0,
            s_max: 10.0,
            e0: 15.0,
            cost_quad_power: 0.01,
            cost_quad_energy: 1e-5,
        }],
        demands: loads
            .iter()
            .enumerate()
            .map(|(column, &(bus, _))| Demand { bus, column })
            .collect(),
        slack_bus: 1,
        delta_hours: 0.25,
    }
}

fn branch(from: usize, to: usize, reactance: f64, flow_limit_mw: f64) -> Branch {
    Branch { from, to, reactance, tap: 1.0, flow_limit_mw }
}
