"""Walk through planning a compressed LeNet for a low-end phone.

Run from the repository root after installing the package:

    python3 demos/lenet_walkthrough.py [--episodes 200]

It prints the uncompressed costs, then runs greedy, DQN-only and two-phase
searches with the analytical accuracy surrogate and compares what each one
found against the all-Skip network. Only latency and storage are hard
constraints; accuracy is traded off through the objective weights.
"""

import argparse
from dataclasses import replace

from adcp import data_path
from adcp.costmodel import evaluate_plan, load_device
from adcp.demand import load_demand
from adcp.netgraph import compressible_layers, load_network
from adcp.oracle import SurrogateOracle
from adcp.orchestrator import SearchConfig, dqn_only_search, greedy_search, two_phase_search
from adcp.plan import CompressionPlan

MB = 8 * 2**20


def describe(report, label):
    print(f"  {label:<12} A {report.A:.3f}  S_p {report.S_p / MB:7.3f} MB  S_f {report.S_f / MB:7.3f} MB"
          f"  T {report.T * 1e3:7.3f} ms  E {report.E * 1e3:7.4f} mJ")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--episodes", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    net = load_network(data_path("networks", "lenet.json"))
    device = load_device(data_path("devices", "redmi3s.json"))
    demand = load_demand(data_path("demands", "default.json"), device)
    oracle = SurrogateOracle()

    print(f"{net.name}: {net.total_weights()} weights, {net.total_macs()} MACs")
    print("compressible layers:", ", ".join(net.layers[i].name for i in compressible_layers(net)))
    baseline = evaluate_plan(net, CompressionPlan(net.name), device, oracle)
    describe(baseline, "all-Skip")
    # The bundled demand fits LeNet as-is; squeeze storage so that compression is required.
    demand = replace(demand, S_bgt=0.4 * baseline.S)
    print(f"demand: A >= {demand.A_min}, T <= {demand.T_bgt * 1e3:g} ms, S <= {demand.S_bgt / MB:.3f} MB\n")

    config = SearchConfig(dqn_episodes=args.episodes, ddpg_episodes=args.episodes, seed=args.seed)
    for search in (greedy_search, dqn_only_search, two_phase_search):
        result = search(net, demand, device, oracle, config=config)
        print(f"{result.optimizer}: {result.evaluations} evaluations, feasible={result.feasible}")
        if result.plan is None:
            continue
        for i, action in result.plan.actions:
            print(f"    {net.layers[i].name:<6} {action.technique.value:<4} ratio {action.ratio:.3f}")
        describe(result.report, "found")
        b, r = baseline, result.report
        print(f"  storage x{b.S_p / r.S_p:.2f}, latency x{b.T / r.T:.2f}, energy x{b.E / r.E:.2f}\n")


if __name__ == "__main__":
    main()
