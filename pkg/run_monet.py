#!/usr/bin/env python3
"""
Launcher for the MoNet harness CLI
"""

import os
import subprocess
import sys


def main():
    backend_dir = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'backend')
    args = sys.argv[1:] or ['verify']

    print(f"🚀 Running monet {' '.join(args)}")
    print("📍 Backend directory:", backend_dir)

    env_file = os.path.join(os.path.dirname(backend_dir), '.env')
    if not os.path.exists(env_file):
        print("⚠️  No .env file found, using built-in defaults (MONET_SEED, MONET_OUT, ...)")

    try:
        result = subprocess.run([sys.executable, 'main.py', *args], cwd=backend_dir)
    except KeyboardInterrupt:
        print("\n🛑 Stopped by user")
        return 130
    if result.returncode == 2:
        print("❌ Verification failed, see the report CSV")
    elif result.returncode != 0:
        print("❌ Command failed, see the log above")
    return result.returncode


if __name__ == "__main__":
    sys.exit(main())
