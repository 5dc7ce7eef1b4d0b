"""Build interaction graphs for one highway scene under each strategy.

Run: python3 demos/01_scene_graph.py
"""
import numpy as np

from trajgnn.scenegraph import (SceneFrame, Strategy, VehicleState, build_graph,
                                find_neighbors, gcn_normalization, inverse_distance_weights)

# Three lanes, 3.5 m wide. Vehicle 4 sits alongside the ego (id 1) in the left lane.
frame = SceneFrame(0.0, [
    VehicleState(1, 50.0, 1.75, 25.0, 0.0, 1),
    VehicleState(2, 80.0, 1.75, 22.0, 0.0, 1),
    VehicleState(3, 20.0, 1.75, 27.0, 0.0, 1),
    VehicleState(4, 52.0, 5.25, 26.0, 0.0, 2),
    VehicleState(5, 90.0, 5.25, 24.0, 0.0, 2),
    VehicleState(6, 400.0, 8.75, 30.0, 0.0, 3),
])

ego = frame.states[0]
slots = find_neighbors(frame, ego)
print("neighbours of vehicle 1:")
for slot, state in slots.items():
    print(f"  {slot:15s} -> vehicle {state.vehicle_id} at x={state.x:.0f}")

ids = frame.vehicle_ids
for strategy in Strategy:
    g = build_graph(frame, strategy)
    edges = ", ".join(f"{ids[s]}->{ids[d]}" for s, d in g.edges)
    print(f"\n{strategy.value}: {g.num_edges} edges")
    print("  " + (edges or "(none)"))

# Edge weights and the symmetric normalisation a GCN layer would use.
g = gcn_normalization(inverse_distance_weights(build_graph(frame, Strategy.NEIGHBOUR), frame))
print("\nneighbour graph, inverse-distance weights and GCN coefficients:")
for (s, d), w, c in zip(g.edges, g.edge_weight, g.norm_coeff):
    print(f"  {ids[s]}->{ids[d]}  w={w:.4f}  c={c:.4f}")
print("\nrelative-position edge features (metres / 100):")
print(np.round(build_graph(frame, Strategy.NEIGHBOUR).edge_feature, 3))
