"""Flight forking versus a coordinator function, with one member cold-starting slowly."""

from raptor.manifest import dag_from_edges
from raptor.simharness import COMPARE_COLUMNS, SimConfig, compare_coordinator


def main() -> None:
    dag = dag_from_edges(["t1", "t2"], [])
    for cold_ms in (0.0, 250.0, 500.0, 1000.0):
        cfg = SimConfig(dag=dag, flight_size=3, task_duration=100.0, invoke_latency=5.0,
                        cold_start_latency=cold_ms, cold_members=frozenset({2}))
        print(f"straggler cold start {cold_ms:.0f} ms")
        for row in compare_coordinator(cfg):
            print("  " + ", ".join(f"{c}={getattr(row, c)}" for c in COMPARE_COLUMNS))


if __name__ == "__main__":
    main()
