import subprocess
import sys
import time
import argparse
import hashlib


def run_main_and_get_time(config, data_path, iterations):
    command = [
        sys.executable,
        "src/main.py",
        "ablate",
        "--config",
        config,
        "--data",
        data_path,
        "--iterations",
        str(iterations),
    ]
    start_time = time.time()
    result = subprocess.run(command, capture_output=True, text=True)
    end_time = time.time()
    execution_time = end_time - start_time
    digest = hashlib.sha256(result.stdout.encode("utf-8")).hexdigest()[:12]
    return f"{execution_time:.7f}", digest, result.returncode


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Run main.py multiple times, timing each run and digesting its metrics.")
    parser.add_argument("-n", type=int, default=10, help="Number of times to run the main script.")
    parser.add_argument("--config", default="data/tiny_config.cfg", help="Run config file or preset name.")
    parser.add_argument("--data", default="data/episodes", help="Dataset directory (see gen-data).")
    parser.add_argument("--iterations", type=int, default=20, help="Training iterations per run.")
    args = parser.parse_args()

    for i in range(args.n):
        execution_time, digest, status = run_main_and_get_time(args.config, args.data, args.iterations)
        print("Run #" + str(i + 1) + ": " + execution_time + " metrics=" + digest + " status=" + str(status))
