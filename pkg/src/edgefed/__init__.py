"""Edge-federation fault detection and preemptive migration co-simulator."""
